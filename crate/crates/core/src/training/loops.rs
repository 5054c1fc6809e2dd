//! Batched gradient accumulation and the two training loops.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{mlm_loss_sum, weighted_bce_sample};
use super::optim::{adamw_step, lr_schedule, AdamState};
use super::{positive_weights, FoldAssignment, PositiveWeights, TrainConfig, TrainError};
use crate::augmentation::{make_samples, make_test_sample, mlm_mask, MaskingConfig, MlmConfig};
use crate::encoder::{Checkpoint, Model, ModelParameters, Pass};
use crate::labeling::TaggedHistory;
use crate::stream_rng;
use crate::tokenizer::{TokenizedSequence, Vocabulary, RESERVED_SPECIALS_PER_SEQUENCE};

/// Samples per unit of parallel work. Fixed so that floating-point sums do
/// not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// One patient's history, split into chunks that fit the token budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientChunks {
    pub patient_id: String,
    /// Patient-level targets over the whole history.
    pub y: Vec<u8>,
    pub chunks: Vec<TaggedHistory>,
}

/// Token ids of known descriptions, so hot loops never re-tokenize.
#[derive(Debug, Clone, Default)]
pub struct DescriptionTable {
    ids: HashMap<String, Vec<u32>>,
}

impl DescriptionTable {
    pub fn new<'a>(vocab: &Vocabulary, descriptions: impl IntoIterator<Item = &'a String>) -> Self {
        let ids = descriptions
            .into_iter()
            .map(|d| (d.clone(), vocab.tokenize(d)))
            .collect();
        Self { ids }
    }

    fn get(&self, vocab: &Vocabulary, description: &str) -> Vec<u32> {
        match self.ids.get(description) {
            Some(ids) => ids.clone(),
            None => vocab.tokenize(description),
        }
    }
}

/// Tokenizes descriptions into one unpadded sequence. Descriptions that do
/// not fit the budget are dropped from the end; a single oversized
/// description is cut.
pub fn encode_descriptions(
    descriptions: &[String],
    table: &DescriptionTable,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> TokenizedSequence {
    let budget = max_tokens.saturating_sub(RESERVED_SPECIALS_PER_SEQUENCE);
    let mut pieces = Vec::with_capacity(descriptions.len());
    let mut used = 0;
    for d in descriptions {
        let mut ids = table.get(vocab, d);
        if used + ids.len() > budget {
            if pieces.is_empty() {
                ids.truncate(budget);
                pieces.push(ids);
            }
            log::debug!("sequence truncated at {used} tokens");
            break;
        }
        used += ids.len();
        pieces.push(ids);
    }
    TokenizedSequence::from_pieces(&pieces, max_tokens)
        .expect("pieces fit the budget")
        .trimmed()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: f64,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_log(records: &[LogRecord], path: &Path) -> std::io::Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)
}

/// Sums per-item losses and gradients over fixed-size chunks in parallel,
/// combining chunk results in index order.
fn accumulate<F>(model: &Model, n: usize, per_item: F) -> Result<(f64, ModelParameters), TrainError>
where
    F: Fn(usize, &mut ModelParameters) -> Result<f64, TrainError> + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
    let parts: Vec<Result<(f64, ModelParameters), TrainError>> = starts
        .par_iter()
        .map(|&s| {
            let mut g = model.params.zeros_like();
            let mut loss = 0.0;
            for i in s..(s + GRAD_CHUNK).min(n) {
                loss += per_item(i, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Option<ModelParameters> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    Ok((total, grads.unwrap_or_else(|| model.params.zeros_like())))
}

fn eval_interval(steps_per_epoch: u64, eval_every: f64) -> u64 {
    ((eval_every * steps_per_epoch as f64).round() as u64).max(1)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best_val_loss: f64,
    pub steps_run: u64,
}

struct MlmItem {
    tokens: TokenizedSequence,
    labels: Vec<Option<u32>>,
}

fn mlm_items(seqs: &[&TokenizedSequence], keys: &[usize], cfg: &MlmConfig, vocab: &Vocabulary, epoch: u64) -> Vec<MlmItem> {
    seqs.par_iter()
        .zip(keys.par_iter())
        .map(|(s, &k)| {
            let mut rng = cfg.rng(&k.to_string(), 0, epoch);
            let (tokens, labels) = mlm_mask(s, cfg, vocab, &mut rng);
            MlmItem { tokens, labels }
        })
        .collect()
}

fn mlm_eval_loss(model: &Model, items: &[MlmItem]) -> Result<f64, TrainError> {
    let parts: Vec<Result<(f64, usize), TrainError>> = items
        .par_iter()
        .map(|it| {
            let rows: Vec<usize> = (0..it.labels.len()).filter(|&r| it.labels[r].is_some()).collect();
            if rows.is_empty() {
                return Ok((0.0, 0));
            }
            let enc = model.encode_forward(&it.tokens, Pass::Eval, &mut stream_rng!(0, "unused"))?;
            let logits = model.mlm_logits_rows(&enc.hidden, &rows);
            let labels: Vec<Option<u32>> = rows.iter().map(|&r| it.labels[r]).collect();
            let (sum, count, _) = mlm_loss_sum(&logits, &labels);
            Ok((sum, count))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0;
    for p in parts {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Masked-token pretraining with early stopping on a held-out split.
/// `sequences` are unmasked, unpadded token sequences.
pub fn run_pretraining(
    sequences: &[TokenizedSequence],
    vocab: &Vocabulary,
    mlm: &MlmConfig,
    cfg: &TrainConfig,
    mut model: Model,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    mlm.validate()?;
    if sequences.is_empty() {
        return Err(TrainError::EmptyData("no pretraining sequences".into()));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut stream_rng!(cfg.seed, "mlm-split"));
    let n_val = if sequences.len() >= 2 {
        ((sequences.len() as f64 * cfg.mlm_val_fraction).ceil() as usize).min(sequences.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let val_seqs: Vec<&TokenizedSequence> = val_idx.iter().map(|&i| &sequences[i]).collect();
    let val_items = mlm_items(&val_seqs, &val_idx, mlm, vocab, 0);

    let b = cfg.batch_size;
    let steps_per_epoch = train_idx.len().div_ceil(b) as u64;
    let total_steps = steps_per_epoch * cfg.mlm_epochs as u64;
    let interval = eval_interval(steps_per_epoch, cfg.eval_every);
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params);
    let mut log = Vec::new();

    let mut best_loss = if val_items.is_empty() { f64::INFINITY } else { mlm_eval_loss(&model, &val_items)? };
    let mut best = model.clone();
    let mut best_step = 0;
    log.push(LogRecord { step: 0, epoch: 0.0, split: "val".into(), loss: best_loss, lr: 0.0 });
    let mut stale = 0;
    let mut step = 0u64;

    'outer: for epoch in 1..=cfg.mlm_epochs as u64 {
        let train_seqs: Vec<&TokenizedSequence> = train_idx.iter().map(|&i| &sequences[i]).collect();
        let items = mlm_items(&train_seqs, &train_idx, mlm, vocab, epoch);
        let mut perm: Vec<usize> = (0..items.len()).collect();
        perm.shuffle(&mut stream_rng!(cfg.seed, "mlm-shuffle", epoch));
        for batch in perm.chunks(b) {
            let selected: usize = batch.iter().map(|&i| items[i].labels.iter().flatten().count()).sum();
            let lr = lr_schedule(step + 1, total_steps, cfg.mlm_lr, cfg.warmup_proportion);
            if selected == 0 {
                log::warn!("MLM batch at step {step} has no selected positions");
                step += 1;
                continue;
            }
            let scale = 1.0 / selected as f64;
            let this_step = step;
            let (loss_sum, grads) = accumulate(&model, batch.len(), |k, g| {
                let it = &items[batch[k]];
                let rows: Vec<usize> = (0..it.labels.len()).filter(|&r| it.labels[r].is_some()).collect();
                if rows.is_empty() {
                    return Ok(0.0);
                }
                let mut rng = stream_rng!(cfg.seed, "mlm-dropout", this_step, k);
                let enc = model.encode_forward(&it.tokens, Pass::Train, &mut rng)?;
                let logits = model.mlm_logits_rows(&enc.hidden, &rows);
                let labels: Vec<Option<u32>> = rows.iter().map(|&r| it.labels[r]).collect();
                let (sum, _, mut dlogits) = mlm_loss_sum(&logits, &labels);
                dlogits.data.iter_mut().for_each(|x| *x *= scale);
                let mut dh = enc.hidden.zeros_like();
                model.mlm_backward(&enc.hidden, &rows, &dlogits, g, &mut dh);
                model.backward(&enc, &dh, g)?;
                Ok(sum)
            })?;
            let loss = loss_sum * scale;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { step, loss });
            }
            adamw_step(&mut model.params, &grads, &mut state, lr, &adam)?;
            step += 1;
            let ep = step as f64 / steps_per_epoch as f64;
            log.push(LogRecord { step, epoch: ep, split: "train".into(), loss, lr });

            if step % interval == 0 || step == total_steps {
                if val_items.is_empty() {
                    best = model.clone();
                    best_step = step;
                    continue;
                }
                let v = mlm_eval_loss(&model, &val_items)?;
                log.push(LogRecord { step, epoch: ep, split: "val".into(), loss: v, lr });
                if v < best_loss {
                    best_loss = v;
                    best = model.clone();
                    best_step = step;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.mlm_patience.max(1) {
                        log::info!("early stopping at step {step}");
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint { model: best, step: best_step, rng_seed: cfg.seed },
        log,
        best_val_loss: best_loss,
        steps_run: step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub fold: usize,
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Tab-separated rows of `patient_id, fold, phenotype_id, probability, label`.
pub fn write_predictions(preds: &[PatientPrediction], phenotype_ids: &[String], path: &Path) -> std::io::Result<()> {
    let mut out = Vec::new();
    writeln!(out, "patient_id\tfold\tphenotype_id\tprobability\tlabel")?;
    for p in preds {
        for (d, id) in phenotype_ids.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{:.17e}\t{}", p.patient_id, p.fold, id, p.probabilities[d], p.labels[d])?;
        }
    }
    std::fs::write(path, out)
}

/// Inputs shared by all fold-models.
pub struct FineTuneInput<'a> {
    pub patients: &'a [PatientChunks],
    pub folds: &'a FoldAssignment,
    pub vocab: &'a Vocabulary,
    pub table: &'a DescriptionTable,
    /// Replacement pool for clinical masking.
    pub corpus: &'a [String],
    pub masking: &'a MaskingConfig,
    pub max_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best_val_loss: f64,
    pub positive_weights: PositiveWeights,
    pub test_predictions: Vec<PatientPrediction>,
}

struct ClsItem {
    tokens: TokenizedSequence,
    y: Vec<u8>,
    omega: Vec<u8>,
}

fn chunk_key(patient_id: &str, chunk: usize) -> String {
    format!("{patient_id}#{chunk}")
}

fn cls_items(input: &FineTuneInput, patients: &[usize], epoch: u64) -> Result<Vec<ClsItem>, TrainError> {
    let per_patient: Vec<Result<Vec<ClsItem>, TrainError>> = patients
        .par_iter()
        .map(|&p| {
            let pc = &input.patients[p];
            let mut out = Vec::new();
            for (c, tagged) in pc.chunks.iter().enumerate() {
                let key = chunk_key(&pc.patient_id, c);
                for s in make_samples(&key, tagged, input.masking, input.corpus, epoch)? {
                    out.push(ClsItem {
                        tokens: encode_descriptions(&s.descriptions, input.table, input.vocab, input.max_tokens),
                        y: s.y,
                        omega: s.omega,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut items = Vec::new();
    for p in per_patient {
        items.extend(p?);
    }
    Ok(items)
}

fn cls_eval_loss(model: &Model, items: &[ClsItem], rho: &[f64]) -> Result<f64, TrainError> {
    let losses: Vec<Result<f64, TrainError>> = items
        .par_iter()
        .map(|it| {
            let enc = model.encode_forward(&it.tokens, Pass::Eval, &mut stream_rng!(0, "unused"))?;
            let c = model.classify(&enc.hidden);
            Ok(weighted_bce_sample(&c.logits, &it.y, &it.omega, rho)?.0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(if items.is_empty() { 0.0 } else { total / items.len() as f64 })
}

/// Per-phenotype probabilities of one sequence.
pub fn predict_probabilities(model: &Model, tokens: &TokenizedSequence) -> Result<Vec<f64>, TrainError> {
    let enc = model.encode_forward(tokens, Pass::Eval, &mut stream_rng!(0, "unused"))?;
    Ok(model.classify(&enc.hidden).probs)
}

/// Fine-tunes fold-model `model_index` and predicts its test fold.
pub fn run_finetuning(
    input: &FineTuneInput,
    model_index: usize,
    cfg: &TrainConfig,
    mut model: Model,
) -> Result<FineTuneOutcome, TrainError> {
    cfg.validate()?;
    input.masking.validate()?;
    let roles = input.folds.roles(model_index);
    let train = input.folds.members_of(&roles.train);
    let val = input.folds.members(roles.val);
    let test = input.folds.members(roles.test);
    if train.is_empty() {
        return Err(TrainError::EmptyData(format!("model {model_index} has no training patients")));
    }
    let train_labels: Vec<Vec<u8>> = train.iter().map(|&p| input.patients[p].y.clone()).collect();
    let weights = positive_weights(&train_labels, cfg.rho_max)?;
    let rho = weights.rho.clone();

    let val_items = cls_items(input, &val, 0)?;
    let b = cfg.batch_size;
    let mi = model_index as u64;
    let mut log = Vec::new();
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params);

    let mut best_loss = cls_eval_loss(&model, &val_items, &rho)?;
    let mut best = model.clone();
    let mut best_step = 0;
    log.push(LogRecord { step: 0, epoch: 0.0, split: "val".into(), loss: best_loss, lr: 0.0 });

    let mut step = 0u64;
    let mut steps_per_epoch = 0;
    let mut total_steps = 0;
    let mut interval = 1;
    for epoch in 1..=cfg.cls_epochs as u64 {
        let items = cls_items(input, &train, epoch)?;
        if epoch == 1 {
            steps_per_epoch = items.len().div_ceil(b) as u64;
            total_steps = steps_per_epoch * cfg.cls_epochs as u64;
            interval = eval_interval(steps_per_epoch, cfg.eval_every);
        }
        let mut perm: Vec<usize> = (0..items.len()).collect();
        perm.shuffle(&mut stream_rng!(cfg.seed, "cls-shuffle", mi, epoch));
        for batch in perm.chunks(b) {
            let lr = lr_schedule(step + 1, total_steps, cfg.cls_lr, cfg.warmup_proportion);
            let scale = 1.0 / batch.len() as f64;
            let this_step = step;
            let (loss_sum, grads) = accumulate(&model, batch.len(), |k, g| {
                let it = &items[batch[k]];
                let mut rng = stream_rng!(cfg.seed, "cls-dropout", mi, this_step, k);
                let enc = model.encode_forward(&it.tokens, Pass::Train, &mut rng)?;
                let c = model.classify(&enc.hidden);
                let (loss, mut dz) = weighted_bce_sample(&c.logits, &it.y, &it.omega, &rho)?;
                dz.iter_mut().for_each(|x| *x *= scale);
                let mut dh = enc.hidden.zeros_like();
                model.classify_backward(&enc.hidden, &dz, g, &mut dh);
                model.backward(&enc, &dh, g)?;
                Ok(loss)
            })?;
            let loss = loss_sum * scale;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { step, loss });
            }
            adamw_step(&mut model.params, &grads, &mut state, lr, &adam)?;
            step += 1;
            let ep = step as f64 / steps_per_epoch as f64;
            log.push(LogRecord { step, epoch: ep, split: "train".into(), loss, lr });
            if step % interval == 0 || step == total_steps {
                let v = cls_eval_loss(&model, &val_items, &rho)?;
                log.push(LogRecord { step, epoch: ep, split: "val".into(), loss: v, lr });
                if v < best_loss || val_items.is_empty() {
                    best_loss = v;
                    best = model.clone();
                    best_step = step;
                }
            }
        }
    }

    let test_predictions = test
        .par_iter()
        .map(|&p| {
            let pc = &input.patients[p];
            let mut probs = vec![0.0f64; pc.y.len()];
            for tagged in &pc.chunks {
                let s = make_test_sample(&pc.patient_id, tagged);
                let tokens = encode_descriptions(&s.descriptions, input.table, input.vocab, input.max_tokens);
                for (acc, q) in probs.iter_mut().zip(predict_probabilities(&best, &tokens)?) {
                    *acc = acc.max(q);
                }
            }
            Ok(PatientPrediction {
                patient_id: pc.patient_id.clone(),
                fold: roles.test,
                probabilities: probs,
                labels: pc.y.clone(),
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    Ok(FineTuneOutcome {
        checkpoint: Checkpoint { model: best, step: best_step, rng_seed: cfg.seed },
        log,
        best_val_loss: best_loss,
        positive_weights: weights,
        test_predictions,
    })
}
