//! Clinical masking, comorbidity replication, loss weights and MLM masking.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::TaggedHistory;
use crate::rng::StreamRng;
use crate::tokenizer::{TokenizedSequence, Vocabulary, MASK, NUM_SPECIALS};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("replacement drawn but the description corpus is empty")]
    EmptyCorpus,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid masking probabilities: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub p_remove: f64,
    pub p_retain: f64,
    pub p_replace: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_remove: 0.8,
            p_retain: 0.1,
            p_replace: 0.1,
            seed: 0,
        }
    }
}

fn check_distribution(ps: &[f64]) -> Result<(), AugmentError> {
    if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(AugmentError::InvalidConfig(format!("{ps:?} outside [0, 1]")));
    }
    let sum: f64 = ps.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AugmentError::InvalidConfig(format!("{ps:?} sums to {sum}")));
    }
    Ok(())
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        check_distribution(&[self.p_remove, self.p_retain, self.p_replace])
    }

    /// Stream for one (patient, replicate, epoch) draw.
    pub fn rng(&self, patient_id: &str, replicate: usize, epoch: u64) -> StreamRng {
        crate::stream_rng!(self.seed, "clinical-mask", patient_id, replicate, epoch)
    }

    pub fn draw(&self, rng: &mut impl Rng) -> MaskAction {
        let u: f64 = rng.random();
        if u < self.p_remove {
            MaskAction::Remove
        } else if u < self.p_remove + self.p_retain {
            MaskAction::Retain
        } else {
            MaskAction::Replace
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingMode {
    /// Stochastic remove/retain/replace.
    TrainVal,
    /// Tagged entries are always removed.
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    Remove,
    Retain,
    Replace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub descriptions: Vec<String>,
    /// Action taken for each entry tagged with the masked phenotype, in order.
    pub actions: Vec<MaskAction>,
}

/// Masks the entries tagged with `phenotype`; untagged entries pass through.
pub fn clinical_mask(
    tagged: &TaggedHistory,
    phenotype: usize,
    cfg: &MaskingConfig,
    mode: MaskingMode,
    corpus: &[String],
    rng: &mut impl Rng,
) -> Result<Masked, AugmentError> {
    let mut descriptions = Vec::with_capacity(tagged.entries.len());
    let mut actions = Vec::new();
    for (i, entry) in tagged.entries.iter().enumerate() {
        if !tagged.is_tagged(i, phenotype) {
            descriptions.push(entry.concept.description.clone());
            continue;
        }
        let action = match mode {
            MaskingMode::Test => MaskAction::Remove,
            MaskingMode::TrainVal => cfg.draw(rng),
        };
        actions.push(action);
        match action {
            MaskAction::Remove => {}
            MaskAction::Retain => descriptions.push(entry.concept.description.clone()),
            MaskAction::Replace => {
                if corpus.is_empty() {
                    return Err(AugmentError::EmptyCorpus);
                }
                descriptions.push(corpus[rng.random_range(0..corpus.len())].clone());
            }
        }
    }
    Ok(Masked {
        descriptions,
        actions,
    })
}

/// Test-time input: every entry tagged with any phenotype removed.
pub fn test_mask_all(tagged: &TaggedHistory) -> Vec<String> {
    tagged
        .entries
        .iter()
        .zip(&tagged.tags)
        .filter(|(_, tags)| tags.is_empty())
        .map(|(e, _)| e.concept.description.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replicate {
    pub index: usize,
    /// Phenotype masked in this replicate; `None` for patients without positives.
    pub phenotype: Option<usize>,
    pub gamma: Vec<u8>,
}

/// One replicate per positive label, in phenotype order; a single unmasked
/// replicate with all-zero `gamma` when there are no positives.
pub fn replicate_for_comorbidities(tagged: &TaggedHistory) -> Vec<Replicate> {
    let d = tagged.y.len();
    let positives = tagged.positives();
    if positives.is_empty() {
        return vec![Replicate {
            index: 0,
            phenotype: None,
            gamma: vec![0; d],
        }];
    }
    positives
        .into_iter()
        .enumerate()
        .map(|(j, p)| {
            let mut gamma = vec![0; d];
            gamma[p] = 1;
            Replicate {
                index: j,
                phenotype: Some(p),
                gamma,
            }
        })
        .collect()
}

/// `omega_d = 1 - y_d (1 - gamma_d)`: zero only for unmasked positives.
pub fn loss_weights(y: &[u8], gamma: &[u8]) -> Result<Vec<u8>, AugmentError> {
    if y.len() != gamma.len() {
        return Err(AugmentError::DimensionMismatch(y.len(), gamma.len()));
    }
    Ok(y.iter()
        .zip(gamma)
        .map(|(&yd, &gd)| if yd == 1 && gd == 0 { 0 } else { 1 })
        .collect())
}

/// A classification training or evaluation sample before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub patient_id: String,
    pub replicate: usize,
    pub masked_phenotype: Option<usize>,
    pub y: Vec<u8>,
    pub gamma: Vec<u8>,
    pub omega: Vec<u8>,
    pub descriptions: Vec<String>,
}

/// Replicates and clinically masks one training/validation patient.
pub fn make_samples(
    patient_id: &str,
    tagged: &TaggedHistory,
    cfg: &MaskingConfig,
    corpus: &[String],
    epoch: u64,
) -> Result<Vec<Sample>, AugmentError> {
    replicate_for_comorbidities(tagged)
        .into_iter()
        .map(|rep| {
            let descriptions = match rep.phenotype {
                Some(d) => {
                    let mut rng = cfg.rng(patient_id, rep.index, epoch);
                    clinical_mask(tagged, d, cfg, MaskingMode::TrainVal, corpus, &mut rng)?
                        .descriptions
                }
                None => tagged
                    .entries
                    .iter()
                    .map(|e| e.concept.description.clone())
                    .collect(),
            };
            Ok(Sample {
                patient_id: patient_id.to_string(),
                replicate: rep.index,
                masked_phenotype: rep.phenotype,
                omega: loss_weights(&tagged.y, &rep.gamma)?,
                y: tagged.y.clone(),
                gamma: rep.gamma,
                descriptions,
            })
        })
        .collect()
}

/// The single unreplicated test sample of a patient.
pub fn make_test_sample(patient_id: &str, tagged: &TaggedHistory) -> Sample {
    let d = tagged.y.len();
    Sample {
        patient_id: patient_id.to_string(),
        replicate: 0,
        masked_phenotype: None,
        y: tagged.y.clone(),
        gamma: vec![0; d],
        omega: vec![1; d],
        descriptions: test_mask_all(tagged),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub p_select: f64,
    pub p_mask_token: f64,
    pub p_random: f64,
    pub p_keep: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            p_select: 0.15,
            p_mask_token: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        check_distribution(&[self.p_mask_token, self.p_random, self.p_keep])?;
        if !(0.0..=1.0).contains(&self.p_select) {
            return Err(AugmentError::InvalidConfig("p_select outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn rng(&self, sequence_key: &str, chunk: usize, epoch: u64) -> StreamRng {
        crate::stream_rng!(self.seed, "mlm", sequence_key, chunk, epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmAction {
    Mask,
    Random(u32),
    Keep,
}

/// Applies per-position corruption decisions. Labels hold the original id
/// at every selected position and `None` elsewhere.
pub fn apply_mlm(
    tokens: &TokenizedSequence,
    decisions: &[Option<MlmAction>],
) -> (TokenizedSequence, Vec<Option<u32>>) {
    let mut out = tokens.clone();
    let mut labels = vec![None; tokens.ids.len()];
    for (pos, decision) in decisions.iter().enumerate() {
        let Some(action) = decision else { continue };
        labels[pos] = Some(tokens.ids[pos]);
        match action {
            MlmAction::Mask => out.ids[pos] = MASK,
            MlmAction::Random(id) => out.ids[pos] = *id,
            MlmAction::Keep => {}
        }
    }
    (out, labels)
}

/// BERT-style random token corruption; specials and padding are never selected.
pub fn mlm_mask(
    tokens: &TokenizedSequence,
    cfg: &MlmConfig,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> (TokenizedSequence, Vec<Option<u32>>) {
    let random_range = NUM_SPECIALS as u32..vocab.len() as u32;
    let decisions: Vec<Option<MlmAction>> = tokens
        .ids
        .iter()
        .zip(&tokens.attention_mask)
        .map(|(&id, &m)| {
            if m == 0 || Vocabulary::is_special(id) {
                return None;
            }
            if rng.random::<f64>() >= cfg.p_select {
                return None;
            }
            let u: f64 = rng.random();
            Some(if u < cfg.p_mask_token {
                MlmAction::Mask
            } else if u < cfg.p_mask_token + cfg.p_random && !random_range.is_empty() {
                MlmAction::Random(rng.random_range(random_range.clone()))
            } else {
                MlmAction::Keep
            })
        })
        .collect();
    apply_mlm(tokens, &decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::tag_history;
    use crate::ontology::{Concept, ConceptKey, MatchCode, PhenotypeDefinition};
    use crate::records::{FusedEntry, Source};
    use crate::stream_rng;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn defs() -> Vec<PhenotypeDefinition> {
        ["T2DM:E11", "HF:I50", "BC:C50", "PC:C61"]
            .iter()
            .map(|s| {
                let (id, code) = s.split_once(':').unwrap();
                PhenotypeDefinition {
                    phenotype_id: id.into(),
                    name: id.into(),
                    codes: vec![MatchCode::new("ICD10", code, true)],
                }
            })
            .collect()
    }

    fn entry(code: &str) -> FusedEntry {
        FusedEntry {
            concept: Concept {
                key: ConceptKey::new("ICD10", code),
                description: format!("description of {code}"),
            },
            date: NaiveDate::from_ymd_opt(2011, 3, 1).unwrap(),
            source: Source::Hospital,
        }
    }

    fn history(codes: &[&str]) -> TaggedHistory {
        let seq: Vec<FusedEntry> = codes.iter().map(|c| entry(c)).collect();
        tag_history(&seq, &defs())
    }

    fn corpus() -> Vec<String> {
        (0..50).map(|i| format!("replacement {i}")).collect()
    }

    #[test]
    fn forced_remove_drops_entry() {
        let t = history(&["J45", "I50.0", "K21"]);
        let cfg = MaskingConfig {
            p_remove: 1.0,
            p_retain: 0.0,
            p_replace: 0.0,
            seed: 1,
        };
        let m = clinical_mask(&t, 1, &cfg, MaskingMode::TrainVal, &corpus(), &mut stream_rng!(1)).unwrap();
        assert_eq!(m.descriptions, vec!["description of J45", "description of K21"]);
        assert_eq!(m.actions, vec![MaskAction::Remove]);
    }

    #[test]
    fn test_mode_removes_all_tagged() {
        let t = history(&["J45", "I50.0", "K21", "I50.1", "E78", "R05"]);
        let m = clinical_mask(&t, 1, &MaskingConfig::default(), MaskingMode::Test, &corpus(), &mut stream_rng!(3)).unwrap();
        assert_eq!(m.descriptions.len(), 4);
        assert!(m.descriptions.iter().all(|d| !d.contains("I50")));
        // deterministic and idempotent
        let again = clinical_mask(&t, 1, &MaskingConfig::default(), MaskingMode::Test, &[], &mut stream_rng!(99)).unwrap();
        assert_eq!(again.descriptions, m.descriptions);
        let retagged = history(&["J45", "K21", "E78", "R05"]);
        let twice = clinical_mask(&retagged, 1, &MaskingConfig::default(), MaskingMode::Test, &[], &mut stream_rng!(5)).unwrap();
        assert_eq!(twice.descriptions, m.descriptions);
    }

    #[test]
    fn replace_with_empty_corpus_fails() {
        let t = history(&["I50.0"]);
        let cfg = MaskingConfig {
            p_remove: 0.0,
            p_retain: 0.0,
            p_replace: 1.0,
            seed: 0,
        };
        assert!(matches!(
            clinical_mask(&t, 1, &cfg, MaskingMode::TrainVal, &[], &mut stream_rng!(0)).unwrap_err(),
            AugmentError::EmptyCorpus
        ));
    }

    #[test]
    fn branch_frequencies_match_config() {
        let t = history(&["J45", "I50.0"]);
        let cfg = MaskingConfig {
            seed: 2024,
            ..Default::default()
        };
        let corpus = corpus();
        let mut counts = [0usize; 3];
        let n = 10_000;
        for i in 0..n {
            let mut rng = cfg.rng("patient", 0, i);
            let m = clinical_mask(&t, 1, &cfg, MaskingMode::TrainVal, &corpus, &mut rng).unwrap();
            let k = match m.actions[0] {
                MaskAction::Remove => 0,
                MaskAction::Retain => 1,
                MaskAction::Replace => 2,
            };
            counts[k] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        for (f, p) in freq.iter().zip([0.8, 0.1, 0.1]) {
            assert!((f - p).abs() <= 0.02, "{freq:?}");
        }
    }

    #[test]
    fn replication_examples() {
        let t = history(&["E11.9", "I50.0", "J45"]);
        assert_eq!(t.y, vec![1, 1, 0, 0]);
        let reps = replicate_for_comorbidities(&t);
        assert_eq!(reps.len(), 2);
        assert_eq!(reps[0].gamma, vec![1, 0, 0, 0]);
        assert_eq!(reps[1].gamma, vec![0, 1, 0, 0]);

        let t = history(&["J45"]);
        let reps = replicate_for_comorbidities(&t);
        assert_eq!(reps.len(), 1);
        assert_eq!(reps[0].gamma, vec![0, 0, 0, 0]);
        assert_eq!(reps[0].phenotype, None);

        let t = history(&["E11.9", "C50.1", "C61"]);
        let reps = replicate_for_comorbidities(&t);
        let nz: Vec<usize> = reps
            .iter()
            .map(|r| r.gamma.iter().position(|&g| g == 1).unwrap())
            .collect();
        assert_eq!(nz, vec![0, 2, 3]);
    }

    #[test]
    fn loss_weight_examples() {
        assert_eq!(loss_weights(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap(), vec![1, 0, 1, 1]);
        assert_eq!(loss_weights(&[0; 4], &[0; 4]).unwrap(), vec![1; 4]);
        assert!(matches!(
            loss_weights(&[1, 0], &[1]).unwrap_err(),
            AugmentError::DimensionMismatch(2, 1)
        ));
    }

    #[test]
    fn mlm_forced_decisions() {
        let v = Vocabulary::build(["alpha beta gamma delta epsilon"], 80).unwrap();
        let pieces: Vec<Vec<u32>> = (0..20).map(|i| vec![5 + (i % 10) as u32]).collect();
        let seq = TokenizedSequence::from_pieces(&pieces, 24).unwrap();
        let mut decisions = vec![None; seq.ids.len()];
        decisions[3] = Some(MlmAction::Mask);
        decisions[7] = Some(MlmAction::Keep);
        let (out, labels) = apply_mlm(&seq, &decisions);
        assert_eq!(out.ids[3], MASK);
        assert_eq!(out.ids[7], seq.ids[7]);
        assert_eq!(labels[3], Some(seq.ids[3]));
        assert_eq!(labels[7], Some(seq.ids[7]));
        assert_eq!(labels.iter().flatten().count(), 2);

        let cfg = MlmConfig {
            p_select: 0.0,
            ..Default::default()
        };
        let (out, labels) = mlm_mask(&seq, &cfg, &v, &mut stream_rng!(4));
        assert_eq!(out, seq);
        assert!(labels.iter().all(Option::is_none));
    }

    #[test]
    fn mlm_selection_rate() {
        let v = Vocabulary::build(["alpha beta gamma delta epsilon"], 80).unwrap();
        let pieces: Vec<Vec<u32>> = (0..100).map(|i| vec![5 + (i % 30) as u32]).collect();
        let seq = TokenizedSequence::from_pieces(&pieces, 128).unwrap();
        let cfg = MlmConfig::default();
        let mut selected = 0usize;
        let mut total = 0usize;
        for i in 0..1000 {
            let (out, labels) = mlm_mask(&seq, &cfg, &v, &mut cfg.rng("seq", 0, i));
            selected += labels.iter().flatten().count();
            total += 100;
            // specials and padding untouched
            assert_eq!(out.ids[0], seq.ids[0]);
            assert_eq!(out.ids[101], seq.ids[101]);
            assert!(labels[0].is_none() && labels[101].is_none() && labels[120].is_none());
        }
        let rate = selected as f64 / total as f64;
        assert!((rate - 0.15).abs() <= 0.005, "{rate}");
    }

    proptest! {
        #[test]
        fn masking_never_touches_untagged(codes in proptest::collection::vec(0usize..6, 0..15), d in 0usize..4, seed in any::<u64>()) {
            let pool = ["E11.9", "I50.0", "C50.1", "C61", "J45", "K21"];
            let cs: Vec<&str> = codes.iter().map(|&i| pool[i]).collect();
            let t = history(&cs);
            let cfg = MaskingConfig { seed, ..Default::default() };
            let corpus = corpus();
            let m = clinical_mask(&t, d, &cfg, MaskingMode::TrainVal, &corpus, &mut cfg.rng("p", 0, 0)).unwrap();
            let untagged_in: Vec<&str> = (0..cs.len()).filter(|&i| !t.is_tagged(i, d)).map(|i| t.entries[i].concept.description.as_str()).collect();
            let untagged_out: Vec<&str> = m.descriptions.iter().map(String::as_str).filter(|s| !s.starts_with("replacement") && !t.entries.iter().enumerate().any(|(i, e)| t.is_tagged(i, d) && e.concept.description == *s)).collect();
            prop_assert_eq!(untagged_in, untagged_out);
            let again = clinical_mask(&t, d, &cfg, MaskingMode::TrainVal, &corpus, &mut cfg.rng("p", 0, 0)).unwrap();
            prop_assert_eq!(again, m);
        }

        #[test]
        fn sample_invariants(codes in proptest::collection::vec(0usize..6, 0..15)) {
            let pool = ["E11.9", "I50.0", "C50.1", "C61", "J45", "K21"];
            let cs: Vec<&str> = codes.iter().map(|&i| pool[i]).collect();
            let t = history(&cs);
            let samples = make_samples("p", &t, &MaskingConfig::default(), &corpus(), 0).unwrap();
            let pos = t.positives().len();
            prop_assert_eq!(samples.len(), pos.max(1));
            for s in &samples {
                prop_assert_eq!(&s.y, &t.y);
                prop_assert!(s.gamma.iter().filter(|&&g| g == 1).count() <= 1);
                prop_assert_eq!(s.gamma.iter().all(|&g| g == 0), s.y.iter().all(|&v| v == 0));
                for k in 0..4 {
                    prop_assert_eq!(s.omega[k] == 0, s.y[k] == 1 && s.gamma[k] == 0);
                    prop_assert!(s.omega[k] >= s.gamma[k]);
                    if s.y[k] == 0 { prop_assert_eq!(s.omega[k], 1); }
                }
            }
        }
    }
}
