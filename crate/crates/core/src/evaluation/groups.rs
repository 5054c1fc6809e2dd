//! Probability-percentile patient groups and their summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::aggregate_biomarker;
use super::survival::{km_estimate, SurvivalCurve};
use super::{EvalError, PredictionSet};
use crate::quantile::{five_number_summary, percentile};
use crate::records::{CohortMeta, PatientHistory, Source};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupPercentiles {
    pub controls_high: f64,
    pub cases_high: f64,
    pub cases_low: f64,
}

impl Default for GroupPercentiles {
    fn default() -> Self {
        Self {
            controls_high: 98.0,
            cases_high: 90.0,
            cases_low: 12.0,
        }
    }
}

/// Row indices into a [`PredictionSet`] for one phenotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientGroups {
    pub phenotype: usize,
    pub cases: Vec<usize>,
    pub controls: Vec<usize>,
    pub cases_high: Vec<usize>,
    pub cases_low: Vec<usize>,
    pub controls_high: Vec<usize>,
    pub percentiles: GroupPercentiles,
    pub controls_high_cutoff: f64,
    /// `None` without any case.
    pub cases_high_cutoff: Option<f64>,
    pub cases_low_cutoff: Option<f64>,
}

impl PatientGroups {
    pub fn named(&self) -> [(&'static str, &[usize]); 5] {
        [
            ("cases", &self.cases),
            ("controls", &self.controls),
            ("cases_high", &self.cases_high),
            ("cases_low", &self.cases_low),
            ("controls_high", &self.controls_high),
        ]
    }
}

fn at_or_above(preds: &PredictionSet, d: usize, rows: &[usize], cutoff: f64) -> Vec<usize> {
    rows.iter().copied().filter(|&i| preds.probabilities[i][d] >= cutoff).collect()
}

fn column(preds: &PredictionSet, d: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| preds.probabilities[i][d]).collect()
}

fn split(preds: &PredictionSet, d: usize) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if d >= preds.phenotype_ids.len() {
        return Err(EvalError::InvalidInput(format!("phenotype index {d} out of range")));
    }
    let (cases, controls) = (0..preds.len()).partition(|&i| preds.labels[i][d] == 1);
    Ok((cases, controls))
}

/// Splits patients into cases and controls and cuts each at the configured
/// linear-interpolation percentiles of its own probability distribution.
pub fn define_groups(preds: &PredictionSet, d: usize, pct: &GroupPercentiles) -> Result<PatientGroups, EvalError> {
    let (cases, controls) = split(preds, d)?;
    let control_probs = column(preds, d, &controls);
    let controls_high_cutoff = percentile(&control_probs, pct.controls_high)
        .ok_or_else(|| EvalError::EmptyCohort(format!("no controls for {}", preds.phenotype_ids[d])))?;
    let case_probs = column(preds, d, &cases);
    let cases_high_cutoff = percentile(&case_probs, pct.cases_high);
    let cases_low_cutoff = percentile(&case_probs, pct.cases_low);
    Ok(PatientGroups {
        phenotype: d,
        controls_high: at_or_above(preds, d, &controls, controls_high_cutoff),
        cases_high: cases_high_cutoff.map_or_else(Vec::new, |c| at_or_above(preds, d, &cases, c)),
        cases_low: cases_low_cutoff.map_or_else(Vec::new, |c| {
            cases.iter().copied().filter(|&i| preds.probabilities[i][d] <= c).collect()
        }),
        cases,
        controls,
        percentiles: *pct,
        controls_high_cutoff,
        cases_high_cutoff,
        cases_low_cutoff,
    })
}

/// Controls at or above the given percentile: the candidate missed cases.
pub fn expand_cohort(preds: &PredictionSet, d: usize, pct: f64) -> Result<Vec<String>, EvalError> {
    let (_, controls) = split(preds, d)?;
    let cutoff = percentile(&column(preds, d, &controls), pct)
        .ok_or_else(|| EvalError::EmptyCohort(format!("no controls for {}", preds.phenotype_ids[d])))?;
    Ok(at_or_above(preds, d, &controls, cutoff)
        .into_iter()
        .map(|i| preds.patient_ids[i].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    /// Min, quartiles, max; `None` for an empty group.
    pub summary: Option<[f64; 5]>,
}

impl Distribution {
    fn of(values: &[f64]) -> Self {
        Self {
            n: values.len(),
            summary: five_number_summary(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub size: usize,
    pub gp_codes: Distribution,
    pub hospital_codes: Distribution,
    pub biomarker: Distribution,
    pub survival: Option<SurvivalCurve>,
}

/// Days from the first recorded event to death or last follow-up.
fn survival_record(history: Option<&PatientHistory>, meta: &CohortMeta) -> Option<(f64, bool)> {
    let start = history.and_then(PatientHistory::first_date)?;
    let (end, event) = match meta.death_date {
        Some(d) => (d, true),
        None => (meta.last_followup, false),
    };
    Some(((end - start).num_days().max(0) as f64, event))
}

/// Code counts, biomarker aggregates and a survival curve for every group.
pub fn group_summary(
    groups: &PatientGroups,
    preds: &PredictionSet,
    histories: &BTreeMap<String, PatientHistory>,
    meta: &BTreeMap<String, CohortMeta>,
    biomarker: &str,
    q: f64,
) -> Vec<GroupSummary> {
    groups
        .named()
        .iter()
        .map(|(name, rows)| {
            let ids: Vec<&String> = rows.iter().map(|&i| &preds.patient_ids[i]).collect();
            let count = |src: Source| -> Vec<f64> {
                ids.iter()
                    .map(|id| histories.get(*id).map_or(0, |h| h.count(src)) as f64)
                    .collect()
            };
            let metas: Vec<&CohortMeta> = ids.iter().filter_map(|id| meta.get(*id)).collect();
            let agg = aggregate_biomarker(metas.iter().copied(), biomarker, q);
            let values: Vec<f64> = agg.values.values().copied().collect();
            let surv: Vec<(f64, bool)> = metas
                .iter()
                .filter_map(|m| survival_record(histories.get(&m.patient_id), m))
                .collect();
            GroupSummary {
                group: name.to_string(),
                size: rows.len(),
                gp_codes: Distribution::of(&count(Source::Gp)),
                hospital_codes: Distribution::of(&count(Source::Hospital)),
                biomarker: Distribution::of(&values),
                survival: km_estimate(&surv).ok(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::ConceptKey;
    use crate::records::{ClinicalEvent, Sex};
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(probs: &[f64], labels: &[u8]) -> PredictionSet {
        PredictionSet {
            phenotype_ids: vec!["D".into()],
            patient_ids: (0..probs.len()).map(|i| format!("p{i}")).collect(),
            folds: vec![0; probs.len()],
            probabilities: probs.iter().map(|&p| vec![p]).collect(),
            labels: labels.iter().map(|&l| vec![l]).collect(),
        }
    }

    #[test]
    fn hundred_distinct_controls_give_two() {
        let probs: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let g = define_groups(&set(&probs, &[0; 100]), 0, &GroupPercentiles::default()).unwrap();
        assert!((1..=3).contains(&g.controls_high.len()));
        assert_eq!(g.controls_high.len(), 2);
        assert!(g.cases.is_empty() && g.cases_high.is_empty());
    }

    #[test]
    fn tied_controls_all_high() {
        let g = define_groups(&set(&[0.4; 10], &[0; 10]), 0, &GroupPercentiles::default()).unwrap();
        assert_eq!(g.controls_high.len(), 10);
    }

    #[test]
    fn sizes_match_sort_and_slice_and_rank_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 600;
        let probs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.2))).collect();
        let preds = set(&probs, &labels);
        let g = define_groups(&preds, 0, &GroupPercentiles::default()).unwrap();

        let mut controls: Vec<f64> = (0..n).filter(|&i| labels[i] == 0).map(|i| probs[i]).collect();
        controls.sort_by(f64::total_cmp);
        let h = (controls.len() - 1) as f64 * 0.98;
        let cut = controls[h.floor() as usize] + (h - h.floor()) * (controls[h.ceil() as usize] - controls[h.floor() as usize]);
        assert_eq!(g.controls_high.len(), controls.iter().filter(|&&p| p >= cut).count());
        let expected = 0.02 * controls.len() as f64;
        assert!((g.controls_high.len() as f64 - expected).abs() <= 1.0);

        assert!(g.cases_high.iter().all(|i| g.cases.contains(i)));
        assert!(g.cases_low.iter().all(|i| g.cases.contains(i)));
        assert!(g.cases_high.len() + g.cases_low.len() <= g.cases.len());

        let expanded = expand_cohort(&preds, 0, 98.0).unwrap();
        let ids: Vec<String> = g.controls_high.iter().map(|&i| preds.patient_ids[i].clone()).collect();
        assert_eq!(expanded, ids);
        assert!(expanded.iter().all(|id| labels[id[1..].parse::<usize>().unwrap()] == 0));

        let squashed = set(&probs.iter().map(|p| p * p * 0.5).collect::<Vec<_>>(), &labels);
        let g2 = define_groups(&squashed, 0, &GroupPercentiles::default()).unwrap();
        assert_eq!((g2.controls_high, g2.cases_high, g2.cases_low), (g.controls_high, g.cases_high, g.cases_low));
    }

    #[test]
    fn percentile_hundred_keeps_only_the_maximum() {
        let probs = [0.1, 0.9, 0.5, 0.3];
        assert_eq!(expand_cohort(&set(&probs, &[0; 4]), 0, 100.0).unwrap(), vec!["p1".to_string()]);
        assert!(matches!(
            expand_cohort(&set(&[0.5], &[1]), 0, 98.0),
            Err(EvalError::EmptyCohort(_))
        ));
    }

    #[test]
    fn summary_counts_codes_by_source() {
        let d = |m: u32| NaiveDate::from_ymd_opt(2010, m, 1).unwrap();
        let ev = |m, source| ClinicalEvent {
            patient_id: "p0".into(),
            date: d(m),
            source,
            key: ConceptKey::new("X", "1"),
        };
        let history = PatientHistory {
            patient_id: "p0".into(),
            events: vec![
                ev(1, Source::Gp),
                ev(2, Source::Gp),
                ev(3, Source::Gp),
                ev(4, Source::Hospital),
                ev(5, Source::Hospital),
            ],
        };
        let meta = CohortMeta {
            patient_id: "p0".into(),
            sex: Sex::Male,
            birth_year: 1940,
            death_date: Some(d(11)),
            last_followup: d(11),
            biomarkers: BTreeMap::new(),
            risk_scores: BTreeMap::new(),
        };
        let preds = set(&[0.9], &[1]);
        let groups = define_groups(&set(&[0.9, 0.1], &[1, 0]), 0, &GroupPercentiles::default()).unwrap();
        let groups = PatientGroups { controls: vec![], controls_high: vec![], ..groups };
        let s = group_summary(
            &groups,
            &preds,
            &BTreeMap::from([("p0".to_string(), history)]),
            &BTreeMap::from([("p0".to_string(), meta)]),
            "hba1c",
            95.0,
        );
        let cases = &s[0];
        assert_eq!(cases.size, 1);
        assert_eq!(cases.gp_codes.summary.unwrap()[0], 3.0);
        assert_eq!(cases.hospital_codes.summary.unwrap()[0], 2.0);
        let curve = cases.survival.as_ref().unwrap();
        assert_eq!(curve.times, vec![304.0]);
        assert_eq!(cases.biomarker.n, 0);
    }
}
