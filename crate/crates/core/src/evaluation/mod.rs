//! Metrics, percentile groups, cohort expansion, survival and t-tests.

mod groups;
mod metrics;
mod stats;
mod survival;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::PatientPrediction;

pub use groups::{
    define_groups, expand_cohort, group_summary, Distribution, GroupPercentiles, GroupSummary, PatientGroups,
};
pub use metrics::{auprc, metrics_at_threshold, ThresholdMetrics};
pub use stats::{aggregate_biomarker, percentile_median_curve, welch_t_test, BiomarkerAggregate, WelchTest};
pub use survival::{km_estimate, SurvivalCurve};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no positive labels for phenotype {0}")]
    NoPositives(String),
    #[error("empty cohort: {0}")]
    EmptyCohort(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Test-set predictions, one row per patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub phenotype_ids: Vec<String>,
    pub patient_ids: Vec<String>,
    pub folds: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
}

impl PredictionSet {
    pub fn new(phenotype_ids: Vec<String>, preds: &[PatientPrediction]) -> Result<Self, EvalError> {
        let set = Self {
            phenotype_ids,
            patient_ids: preds.iter().map(|p| p.patient_id.clone()).collect(),
            folds: preds.iter().map(|p| p.fold).collect(),
            probabilities: preds.iter().map(|p| p.probabilities.clone()).collect(),
            labels: preds.iter().map(|p| p.labels.clone()).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let d = self.phenotype_ids.len();
        let n = self.patient_ids.len();
        if self.folds.len() != n || self.probabilities.len() != n || self.labels.len() != n {
            return Err(EvalError::InvalidInput("ragged prediction set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for i in 0..n {
            if !seen.insert(&self.patient_ids[i]) {
                return Err(EvalError::InvalidInput(format!("duplicate patient {}", self.patient_ids[i])));
            }
            if self.probabilities[i].len() != d || self.labels[i].len() != d {
                return Err(EvalError::InvalidInput(format!("row {} has wrong width", self.patient_ids[i])));
            }
            if self.probabilities[i].iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(EvalError::InvalidInput(format!("probability out of range for {}", self.patient_ids[i])));
            }
            if self.labels[i].iter().any(|&l| l > 1) {
                return Err(EvalError::InvalidInput(format!("non-binary label for {}", self.patient_ids[i])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    pub fn phenotype_index(&self, id: &str) -> Option<usize> {
        self.phenotype_ids.iter().position(|p| p == id)
    }

    pub fn scores(&self, d: usize) -> Vec<f64> {
        self.probabilities.iter().map(|r| r[d]).collect()
    }

    pub fn label_column(&self, d: usize) -> Vec<u8> {
        self.labels.iter().map(|r| r[d]).collect()
    }

    /// Rows whose fold is `fold`.
    pub fn fold_subset(&self, fold: usize) -> PredictionSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.folds[i] == fold).collect();
        PredictionSet {
            phenotype_ids: self.phenotype_ids.clone(),
            patient_ids: keep.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            folds: keep.iter().map(|&i| self.folds[i]).collect(),
            probabilities: keep.iter().map(|&i| self.probabilities[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Parses the tab-separated predictions file written by training.
    pub fn parse_tsv(text: &str) -> Result<Self, EvalError> {
        let mut phenotypes: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, (usize, BTreeMap<String, (f64, u8)>)> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| EvalError::InvalidInput(format!("line {}: {m}", n + 1));
            if f.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let fold: usize = f[1].parse().map_err(|_| bad("fold"))?;
            let p: f64 = f[3].parse().map_err(|_| bad("probability"))?;
            let l: u8 = f[4].parse().map_err(|_| bad("label"))?;
            if !phenotypes.iter().any(|x| x == f[2]) {
                phenotypes.push(f[2].to_string());
            }
            let entry = rows.entry(f[0].to_string()).or_insert_with(|| {
                order.push(f[0].to_string());
                (fold, BTreeMap::new())
            });
            if entry.0 != fold {
                return Err(bad("patient appears in two folds"));
            }
            entry.1.insert(f[2].to_string(), (p, l));
        }
        let mut set = PredictionSet {
            phenotype_ids: phenotypes.clone(),
            patient_ids: Vec::new(),
            folds: Vec::new(),
            probabilities: Vec::new(),
            labels: Vec::new(),
        };
        for pid in order {
            let (fold, vals) = &rows[&pid];
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for ph in &phenotypes {
                let (p, l) = vals
                    .get(ph)
                    .ok_or_else(|| EvalError::InvalidInput(format!("{pid} lacks {ph}")))?;
                probs.push(*p);
                labels.push(*l);
            }
            set.patient_ids.push(pid);
            set.folds.push(*fold);
            set.probabilities.push(probs);
            set.labels.push(labels);
        }
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_tsv(&text)
    }
}

/// Writes `(x, y)` pairs as a two-column table with a header.
pub fn write_xy_tsv(header: (&str, &str), rows: &[(f64, f64)], path: &Path) -> std::io::Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}\t{}", header.0, header.1)?;
    for (x, y) in rows {
        writeln!(out, "{x}\t{y}")?;
    }
    std::fs::write(path, out)
}
