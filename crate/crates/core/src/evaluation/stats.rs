//! Welch's t-test, biomarker aggregation and percentile-median curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::EvalError;
use crate::quantile::{median, percentile};
use crate::records::CohortMeta;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

impl WelchTest {
    /// One-sided p-value for the alternative `mean(a) > mean(b)`.
    pub fn p_greater(&self) -> f64 {
        if self.t.is_infinite() {
            return if self.t > 0.0 { 0.0 } else { 1.0 };
        }
        if self.t == 0.0 {
            return 0.5;
        }
        let dist = StudentsT::new(0.0, 1.0, self.df).expect("positive df");
        dist.sf(self.t)
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided unequal-variance t-test with Welch–Satterthwaite df.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::InsufficientData(format!(
            "samples of size {} and {}; need at least 2 each",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(EvalError::InvalidInput("non-finite sample value".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va / na;
    let sb = vb / nb;
    let se2 = sa + sb;
    let diff = ma - mb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if diff == 0.0 {
            WelchTest { t: 0.0, df, p: 1.0 }
        } else {
            WelchTest { t: diff.signum() * f64::INFINITY, df, p: 0.0 }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| EvalError::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchTest { t, df, p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerAggregate {
    pub values: BTreeMap<String, f64>,
    /// Patients without any measurement of the biomarker.
    pub excluded: Vec<String>,
}

/// Per-patient `q`-th percentile of one biomarker's measurements.
pub fn aggregate_biomarker<'a>(
    meta: impl IntoIterator<Item = &'a CohortMeta>,
    biomarker: &str,
    q: f64,
) -> BiomarkerAggregate {
    let mut out = BiomarkerAggregate {
        values: BTreeMap::new(),
        excluded: Vec::new(),
    };
    for m in meta {
        let vals: Vec<f64> = m
            .biomarkers
            .get(biomarker)
            .map(|v| v.iter().map(|x| x.value).collect())
            .unwrap_or_default();
        match percentile(&vals, q) {
            Some(p) => {
                out.values.insert(m.patient_id.clone(), p);
            }
            None => out.excluded.push(m.patient_id.clone()),
        }
    }
    if !out.excluded.is_empty() {
        log::info!("{} patients have no {biomarker} measurement", out.excluded.len());
    }
    out
}

/// Ranks patients by `score` into equal-count bins and reports the median
/// prediction per bin as `(percentile, median)`. Remainders go to the
/// leading bins; fewer patients than bins reduces the bin count.
pub fn percentile_median_curve(score: &[f64], prediction: &[f64], bins: usize) -> Result<Vec<(f64, f64)>, EvalError> {
    if score.len() != prediction.len() {
        return Err(EvalError::InvalidInput("score and prediction lengths differ".into()));
    }
    if score.is_empty() || bins == 0 {
        return Err(EvalError::EmptyCohort("no patients for the percentile curve".into()));
    }
    if score.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::InvalidInput("non-finite score".into()));
    }
    let n = score.len();
    let bins = if n < bins {
        log::warn!("{n} patients for {bins} bins; using {n} bins");
        n
    } else {
        bins
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        let vals: Vec<f64> = order[start..start + size].iter().map(|&i| prediction[i]).collect();
        out.push(((b + 1) as f64 * 100.0 / bins as f64, median(&vals).expect("non-empty bin")));
        start += size;
    }
    Ok(out)
}
