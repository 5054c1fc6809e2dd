//! Losses, optimizer, fold protocol and the pretraining/fine-tuning loops.

mod folds;
mod loops;
pub mod loss;
pub mod optim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::AugmentError;
use crate::encoder::ModelError;
use crate::tokenizer::TokenizerError;

pub use folds::{stratified_folds, FoldAssignment, FoldRoles};
pub use loops::{
    encode_descriptions, predict_probabilities, run_finetuning, run_pretraining, write_log, write_predictions,
    DescriptionTable, FineTuneInput, FineTuneOutcome, LogRecord, PatientChunks, PatientPrediction,
    PretrainOutcome,
};
pub use loss::{mlm_loss, weighted_bce_loss};
pub use optim::{adamw_step, lr_schedule, AdamHyper, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("phenotype {phenotype} has no positive training examples")]
    NoPositives { phenotype: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("loss diverged at step {step}: {loss}")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no training data: {0}")]
    EmptyData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mlm_lr: f64,
    pub cls_lr: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    pub mlm_epochs: usize,
    pub cls_epochs: usize,
    /// Evaluation interval as a fraction of an epoch.
    pub eval_every: f64,
    /// Fraction of pretraining sequences held out for early stopping.
    pub mlm_val_fraction: f64,
    /// Evaluation windows without improvement before pretraining stops.
    pub mlm_patience: usize,
    /// Replaces ρ for phenotypes without training positives instead of failing.
    pub rho_max: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            mlm_lr: 4e-5,
            cls_lr: 1e-5,
            weight_decay: 0.01,
            warmup_proportion: 0.25,
            mlm_epochs: 5,
            cls_epochs: 3,
            eval_every: 0.25,
            mlm_val_fraction: 0.1,
            mlm_patience: 1,
            rho_max: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mlm_lr > 0.0 && self.cls_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion must be in [0, 1]");
        }
        if !(self.eval_every > 0.0) {
            return bad("eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.mlm_val_fraction) {
            return bad("mlm_val_fraction must be in [0, 1)");
        }
        if let Some(r) = self.rho_max {
            if !(r > 0.0) {
                return bad("rho_max must be positive");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

/// Negatives-to-positives ratio per phenotype on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveWeights {
    pub rho: Vec<f64>,
    pub tp: Vec<usize>,
    pub tn: Vec<usize>,
}

/// `ρ_d = TN_d / TP_d` over pre-replication training labels.
pub fn positive_weights(labels: &[Vec<u8>], rho_max: Option<f64>) -> Result<PositiveWeights, TrainError> {
    let d = labels.first().map_or(0, Vec::len);
    let mut tp = vec![0usize; d];
    let mut tn = vec![0usize; d];
    for row in labels {
        if row.len() != d {
            return Err(TrainError::DimensionMismatch(format!("label row of {} vs {d}", row.len())));
        }
        for j in 0..d {
            if row[j] == 1 {
                tp[j] += 1;
            } else {
                tn[j] += 1;
            }
        }
    }
    let mut rho = Vec::with_capacity(d);
    for j in 0..d {
        if tp[j] == 0 {
            match rho_max {
                Some(cap) => {
                    log::warn!("phenotype {j} has no training positives; using rho = {cap}");
                    rho.push(cap);
                }
                None => return Err(TrainError::NoPositives { phenotype: j }),
            }
        } else {
            let r = tn[j] as f64 / tp[j] as f64;
            rho.push(rho_max.map_or(r, |cap| r.min(cap)));
        }
    }
    Ok(PositiveWeights { rho, tp, tn })
}
