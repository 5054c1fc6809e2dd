//! File-to-file pipeline stages and their run configuration.
//!
//! Each stage reads only files and writes only files under the output
//! directory, then records a manifest with the config hash, the seed and
//! the SHA-256 of every artifact it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augmentation::{MaskingConfig, MlmConfig};
use crate::encoder::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_biomarker, auprc, define_groups, expand_cohort, group_summary, metrics_at_threshold,
    percentile_median_curve, welch_t_test, write_xy_tsv, GroupPercentiles, GroupSummary, PredictionSet,
    ThresholdMetrics,
};
use crate::labeling::{build_label_matrix, tag_history, TaggedHistory};
use crate::ontology::{load_catalog, load_phenotype_definitions};
use crate::quantile::{median, spearman};
use crate::records::{
    aggregate_hospital_visits, filter_min_terms, fuse_histories, ingest_events, load_meta, split_overlong,
    PatientHistory,
};
use crate::stream_rng;
use crate::synthgen::{generate_cohort, generate_toy_catalog, risk_score_name, SynthConfig};
use crate::tokenizer::Vocabulary;
use crate::training::{
    encode_descriptions, run_finetuning, run_pretraining, stratified_folds, write_log, write_predictions,
    DescriptionTable, FineTuneInput, FoldAssignment, PatientChunks, PatientPrediction, TrainConfig,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub definitions: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub n_patients: usize,
    pub n_concepts: usize,
    /// Association strength of correlated background concepts.
    pub strength: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { n_patients: 2000, n_concepts: 400, strength: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordSettings {
    pub hospital_window_days: i64,
    pub min_terms: usize,
}

impl Default for RecordSettings {
    fn default() -> Self {
        Self { hospital_window_days: 7, min_terms: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub max_piece_chars: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self { vocab_size: 2000, max_piece_chars: crate::tokenizer::DEFAULT_MAX_PIECE_CHARS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldSettings {
    pub k: usize,
    /// Fold-models to train; empty means all `k`.
    pub models: Vec<usize>,
    /// Fail in `train` when no pretrained checkpoint exists instead of
    /// starting from random weights.
    pub require_pretrained: bool,
}

impl Default for FoldSettings {
    fn default() -> Self {
        Self { k: 5, models: Vec::new(), require_pretrained: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub threshold: f64,
    pub percentiles: GroupPercentiles,
    pub expansion_percentile: f64,
    pub biomarker: String,
    pub biomarker_percentile: f64,
    pub curve_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            percentiles: GroupPercentiles::default(),
            expansion_percentile: 98.0,
            biomarker: "hba1c".into(),
            biomarker_percentile: 95.0,
            curve_bins: 10,
        }
    }
}

/// Everything a pipeline run depends on. The global `seed` overrides the
/// seeds of the masking, MLM and training sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthSettings,
    pub records: RecordSettings,
    pub tokenizer: TokenizerSettings,
    pub masking: MaskingConfig,
    pub mlm: MlmConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: FoldSettings,
    pub evaluation: EvalSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the field at dotted `path` to `value`, parsed as JSON when
    /// possible and as a string otherwise.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let (parent, field) = match path.rsplit_once('.') {
            Some((p, f)) => (format!("/{}", p.replace('.', "/")), f),
            None => (String::new(), path),
        };
        let section = root
            .pointer_mut(&parent)
            .ok_or_else(|| Error::Config(format!("unknown config field {path}")))?;
        if section.is_null() {
            *section = Value::Object(Default::default());
        }
        let obj = section
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: parent is not a section")))?;
        if !obj.contains_key(field) {
            return Err(Error::Config(format!("unknown config field {path}")));
        }
        obj.insert(field.to_string(), parsed);
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    /// Copies the global seed into every seeded section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.masking.seed = c.seed;
        c.mlm.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.masking.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mlm.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.folds.k < 3 {
            return bad("folds.k must be at least 3".into());
        }
        if let Some(&m) = self.folds.models.iter().find(|&&m| m >= self.folds.k) {
            return bad(format!("fold-model {m} out of range for k = {}", self.folds.k));
        }
        if self.records.hospital_window_days < 1 {
            return bad("records.hospital_window_days must be at least 1".into());
        }
        let e = &self.evaluation;
        for (name, p) in [
            ("expansion_percentile", e.expansion_percentile),
            ("biomarker_percentile", e.biomarker_percentile),
            ("percentiles.controls_high", e.percentiles.controls_high),
            ("percentiles.cases_high", e.percentiles.cases_high),
            ("percentiles.cases_low", e.percentiles.cases_low),
        ] {
            if !(0.0..=100.0).contains(&p) {
                return bad(format!("evaluation.{name} must lie in [0, 100]"));
            }
        }
        if e.curve_bins == 0 {
            return bad("evaluation.curve_bins must be positive".into());
        }
        if self.synth.n_concepts < crate::synthgen::MIN_TOY_CONCEPTS {
            return bad(format!("synth.n_concepts must be at least {}", crate::synthgen::MIN_TOY_CONCEPTS));
        }
        if !(0.0..=1.0).contains(&self.synth.strength) {
            return bad("synth.strength must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the resolved config's JSON.
    /// SHA-256 of the resolved config. The output directory is left out so
    /// the same run in two places hashes the same.
    pub fn hash(&self) -> String {
        let mut cfg = self.resolved();
        cfg.paths.out_dir = None;
        hex(&Sha256::digest(serde_json::to_vec(&cfg).expect("config serializes")))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    fn input(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir().join(default))
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.input(&self.paths.catalog, "catalog.tsv")
    }

    pub fn definitions_path(&self) -> PathBuf {
        self.input(&self.paths.definitions, "definitions.json")
    }

    pub fn events_path(&self) -> PathBuf {
        self.input(&self.paths.events, "events.jsonl")
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.input(&self.paths.metadata, "meta.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.input(&self.paths.vocab, "vocab.txt")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    /// Fold-models the `train` stage runs.
    pub fn fold_models(&self) -> Vec<usize> {
        if self.folds.models.is_empty() {
            (0..self.folds.k).collect()
        } else {
            self.folds.models.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Artifact file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_path(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.artifact(&format!("manifest-{command}.json"))
}

pub fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[PathBuf]) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    for p in outputs {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        files.insert(name, file_sha256(p)?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        outputs: files,
    };
    let path = manifest_path(cfg, command);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes a toy catalog, definitions, events and metadata.
pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let toy = generate_toy_catalog(cfg.synth.n_concepts, cfg.seed)?;
    let mut synth_cfg = SynthConfig::desk_default(&toy.layout, &toy.definitions, cfg.synth.n_patients, cfg.seed);
    for p in &mut synth_cfg.phenotypes {
        p.strength = cfg.synth.strength;
    }
    let cohort = generate_cohort(&synth_cfg, &toy.catalog, &toy.definitions)?;
    let out = vec![cfg.catalog_path(), cfg.definitions_path(), cfg.events_path(), cfg.metadata_path()];
    for p in &out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    toy.write(&out[0], &out[1])?;
    cohort.write(&out[2], &out[3])?;
    log::info!("synthesized {} patients and {} events", cohort.meta.len(), cohort.events.len());
    Ok(out)
}

/// One retained patient after fusion and tagging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedPatient {
    pub patient_id: String,
    pub fold: usize,
    pub history: TaggedHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCohort {
    pub phenotype_ids: Vec<String>,
    pub k: usize,
    pub excluded: usize,
    pub patients: Vec<PreparedPatient>,
}

impl PreparedCohort {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        read_json(&cfg.artifact("cohort.json"))
    }

    pub fn folds(&self) -> FoldAssignment {
        FoldAssignment {
            k: self.k,
            folds: self.patients.iter().map(|p| p.fold).collect(),
        }
    }

    /// Distinct descriptions no phenotype tags, sorted; the replacement
    /// corpus for clinical masking.
    pub fn untagged_corpus(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .patients
            .iter()
            .flat_map(|p| {
                p.history
                    .entries
                    .iter()
                    .zip(&p.history.tags)
                    .filter(|(_, t)| t.is_empty())
                    .map(|(e, _)| &e.concept.description)
            })
            .collect();
        set.into_iter().cloned().collect()
    }
}

/// Aggregated, fused histories of every patient in the event file.
pub fn load_histories(cfg: &RunConfig) -> Result<(BTreeMap<String, PatientHistory>, crate::OntologyCatalog)> {
    let catalog = load_catalog(&cfg.catalog_path())?;
    let ingested = ingest_events(&cfg.events_path(), &catalog)?;
    if ingested.dropped > 0 {
        log::warn!("dropped {} events with unknown concepts", ingested.dropped);
    }
    let histories = ingested
        .histories
        .into_iter()
        .map(|(id, h)| {
            let h = aggregate_hospital_visits(&h, cfg.records.hospital_window_days);
            (id, h)
        })
        .collect();
    Ok((histories, catalog))
}

/// Fuses, filters and tags histories and assigns stratified folds.
pub fn preprocess(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let (histories, catalog) = load_histories(cfg)?;
    let defs = load_phenotype_definitions(&cfg.definitions_path(), &catalog)?;
    for u in &defs.unresolved {
        log::warn!("{}: code {} matches no catalog concept", u.phenotype_id, u.code.code);
    }
    let fused = histories.iter().map(|(id, h)| (id.clone(), fuse_histories(h, &catalog))).collect();
    let (kept, excluded) = filter_min_terms(fused, cfg.records.min_terms);
    log::info!("kept {} patients, excluded {excluded} with fewer than {} terms", kept.len(), cfg.records.min_terms);
    let tagged: Vec<(String, TaggedHistory)> =
        kept.iter().map(|(id, seq)| (id.clone(), tag_history(seq, &defs.definitions))).collect();
    if tagged.len() < cfg.folds.k {
        return Err(Error::Config(format!("{} patients cannot fill {} folds", tagged.len(), cfg.folds.k)));
    }
    let labels = build_label_matrix(tagged.iter().map(|(id, t)| (id.as_str(), t)), &defs.definitions);
    let folds = stratified_folds(&labels.rows, cfg.folds.k, cfg.seed);
    let cohort = PreparedCohort {
        phenotype_ids: labels.phenotype_ids.clone(),
        k: cfg.folds.k,
        excluded,
        patients: tagged
            .into_iter()
            .zip(&folds.folds)
            .map(|((patient_id, history), &fold)| PreparedPatient { patient_id, fold, history })
            .collect(),
    };
    let cohort_path = cfg.artifact("cohort.json");
    let labels_path = cfg.artifact("labels.tsv");
    write_json(&cohort_path, &cohort)?;
    labels.write_tsv(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    Ok(vec![cohort_path, labels_path])
}

fn vocabulary_corpus(cfg: &RunConfig) -> Result<Vec<String>> {
    Ok(load_catalog(&cfg.catalog_path())?.descriptions())
}

/// Builds the subword vocabulary from the catalog's descriptions.
pub fn build_vocab(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let corpus = vocabulary_corpus(cfg)?;
    let vocab = Vocabulary::build_with(corpus.iter().map(String::as_str), cfg.tokenizer.vocab_size, cfg.tokenizer.max_piece_chars)?;
    let path = cfg.vocab_path();
    vocab.save(&path)?;
    log::info!("vocabulary of {} tokens", vocab.len());
    Ok(vec![path])
}

fn load_or_build_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = cfg.vocab_path();
    if !path.exists() {
        log::info!("{} missing; building the vocabulary", path.display());
        build_vocab(cfg)?;
    }
    Ok(Vocabulary::load(&path)?)
}

/// Model config with the vocabulary size taken from the actual vocabulary.
pub fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    let mut m = cfg.model.clone();
    if m.vocab_size != vocab.len() {
        log::info!("model vocab_size {} set to the vocabulary's {}", m.vocab_size, vocab.len());
        m.vocab_size = vocab.len();
    }
    m
}

/// Splits each patient into token-budget chunks with their own tags.
pub fn patient_chunks(cohort: &PreparedCohort, vocab: &Vocabulary, max_tokens: usize) -> Result<Vec<PatientChunks>> {
    cohort
        .patients
        .iter()
        .map(|p| {
            let pieces = split_overlong(&p.history.entries, vocab, max_tokens)?;
            let d = p.history.y.len();
            let mut offset = 0;
            let chunks = pieces
                .into_iter()
                .map(|entries| {
                    let tags = p.history.tags[offset..offset + entries.len()].to_vec();
                    offset += entries.len();
                    let mut y = vec![0u8; d];
                    for &k in tags.iter().flatten() {
                        y[k] = 1;
                    }
                    TaggedHistory { entries, tags, y }
                })
                .collect();
            Ok(PatientChunks {
                patient_id: p.patient_id.clone(),
                y: p.history.y.clone(),
                chunks,
            })
        })
        .collect()
}

fn description_table(patients: &[PatientChunks], vocab: &Vocabulary, corpus: &[String]) -> DescriptionTable {
    let all: BTreeSet<&String> = patients
        .iter()
        .flat_map(|p| p.chunks.iter().flat_map(|c| c.entries.iter().map(|e| &e.concept.description)))
        .chain(corpus)
        .collect();
    DescriptionTable::new(vocab, all)
}

/// MLM pretraining over every patient's unmasked text.
pub fn pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let cfg = cfg.resolved();
    let cohort = PreparedCohort::load(&cfg)?;
    let vocab = load_or_build_vocab(&cfg)?;
    let mcfg = model_config(&cfg, &vocab);
    let patients = patient_chunks(&cohort, &vocab, mcfg.max_tokens)?;
    let table = description_table(&patients, &vocab, &[]);
    let sequences: Vec<_> = patients
        .iter()
        .flat_map(|p| p.chunks.iter())
        .map(|c| {
            let descs: Vec<String> = c.entries.iter().map(|e| e.concept.description.clone()).collect();
            encode_descriptions(&descs, &table, &vocab, mcfg.max_tokens)
        })
        .collect();
    let model = Model::new(mcfg, &mut stream_rng!(cfg.seed, "init"))?;
    let outcome = run_pretraining(&sequences, &vocab, &cfg.mlm, &cfg.train, model)?;
    log::info!("pretraining stopped after {} steps, best validation loss {:.4}", outcome.steps_run, outcome.best_val_loss);
    let ckpt = cfg.artifact("pretrain.ckpt");
    let log_path = cfg.artifact("pretrain-log.jsonl");
    save_checkpoint(&outcome.checkpoint, &ckpt)?;
    write_log(&outcome.log, &log_path).map_err(|e| Error::io(&log_path, e))?;
    Ok(vec![ckpt, log_path])
}

/// Fine-tunes the configured fold-models and writes pooled test predictions.
pub fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let cfg = cfg.resolved();
    let cohort = PreparedCohort::load(&cfg)?;
    let vocab = load_or_build_vocab(&cfg)?;
    let mcfg = model_config(&cfg, &vocab);
    let patients = patient_chunks(&cohort, &vocab, mcfg.max_tokens)?;
    let corpus = cohort.untagged_corpus();
    let table = description_table(&patients, &vocab, &corpus);
    let folds = cohort.folds();
    let ckpt_path = cfg.artifact("pretrain.ckpt");
    let start = if ckpt_path.exists() {
        load_checkpoint(&ckpt_path, Some(&mcfg))?.model
    } else if cfg.folds.require_pretrained {
        return Err(Error::Config(format!("{} is missing", ckpt_path.display())));
    } else {
        log::warn!("no pretrained checkpoint; fine-tuning from random weights");
        Model::new(mcfg.clone(), &mut stream_rng!(cfg.seed, "init"))?
    };
    let input = FineTuneInput {
        patients: &patients,
        folds: &folds,
        vocab: &vocab,
        table: &table,
        corpus: &corpus,
        masking: &cfg.masking,
        max_tokens: mcfg.max_tokens,
    };
    let mut outputs = Vec::new();
    let mut predictions: Vec<PatientPrediction> = Vec::new();
    for i in cfg.fold_models() {
        let outcome = run_finetuning(&input, i, &cfg.train, start.clone())?;
        log::info!("fold-model {i}: best validation loss {:.4}", outcome.best_val_loss);
        let ckpt = cfg.artifact(&format!("fold-{i}.ckpt"));
        let log_path = cfg.artifact(&format!("fold-{i}-log.jsonl"));
        save_checkpoint(&outcome.checkpoint, &ckpt)?;
        write_log(&outcome.log, &log_path).map_err(|e| Error::io(&log_path, e))?;
        outputs.push(ckpt);
        outputs.push(log_path);
        predictions.extend(outcome.test_predictions);
    }
    predictions.sort_by(|a, b| (a.fold, &a.patient_id).cmp(&(b.fold, &b.patient_id)));
    let pred_path = cfg.artifact("predictions.tsv");
    write_predictions(&predictions, &cohort.phenotype_ids, &pred_path).map_err(|e| Error::io(&pred_path, e))?;
    outputs.push(pred_path);
    Ok(outputs)
}

pub fn load_predictions(cfg: &RunConfig) -> Result<PredictionSet> {
    Ok(PredictionSet::load(&cfg.artifact("predictions.tsv"))?)
}

/// Case-vs-control comparison of predicted probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub case_median: f64,
    pub control_median: f64,
    /// One-sided Welch p-value for cases above controls.
    pub p_greater: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeMetrics {
    pub phenotype_id: String,
    pub patients: usize,
    pub cases: usize,
    pub prevalence: f64,
    pub at_threshold: Option<ThresholdMetrics>,
    pub auprc: Option<f64>,
    pub separation: Option<Separation>,
    /// Spearman correlation of bin rank with the median prediction of
    /// risk-score bins.
    pub risk_curve_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub phenotypes: Vec<PhenotypeMetrics>,
    /// The same metrics restricted to each evaluated test fold.
    pub per_fold: BTreeMap<usize, Vec<PhenotypeMetrics>>,
}

fn separation(preds: &PredictionSet, d: usize) -> Option<Separation> {
    let s = preds.scores(d);
    let y = preds.label_column(d);
    let cases: Vec<f64> = s.iter().zip(&y).filter(|(_, &l)| l == 1).map(|(&p, _)| p).collect();
    let controls: Vec<f64> = s.iter().zip(&y).filter(|(_, &l)| l == 0).map(|(&p, _)| p).collect();
    let t = welch_t_test(&cases, &controls).ok()?;
    Some(Separation {
        case_median: median(&cases)?,
        control_median: median(&controls)?,
        p_greater: t.p_greater(),
    })
}

/// Risk-score deciles against predictions, if the metadata has the score.
pub fn risk_curve(
    preds: &PredictionSet,
    d: usize,
    meta: &BTreeMap<String, crate::CohortMeta>,
    bins: usize,
) -> Option<Vec<(f64, f64)>> {
    let name = risk_score_name(&preds.phenotype_ids[d]);
    let mut score = Vec::new();
    let mut pred = Vec::new();
    for (i, pid) in preds.patient_ids.iter().enumerate() {
        if let Some(v) = meta.get(pid).and_then(|m| m.risk_scores.get(&name)) {
            score.push(*v);
            pred.push(preds.probabilities[i][d]);
        }
    }
    percentile_median_curve(&score, &pred, bins).ok()
}

pub fn curve_spearman(curve: &[(f64, f64)]) -> Option<f64> {
    let x: Vec<f64> = (0..curve.len()).map(|i| i as f64).collect();
    let y: Vec<f64> = curve.iter().map(|c| c.1).collect();
    spearman(&x, &y)
}

fn phenotype_metrics(
    preds: &PredictionSet,
    threshold: f64,
    meta: Option<&BTreeMap<String, crate::CohortMeta>>,
    bins: usize,
) -> Vec<PhenotypeMetrics> {
    (0..preds.phenotype_ids.len())
        .map(|d| {
            let s = preds.scores(d);
            let y = preds.label_column(d);
            let cases = y.iter().filter(|&&l| l == 1).count();
            PhenotypeMetrics {
                phenotype_id: preds.phenotype_ids[d].clone(),
                patients: y.len(),
                cases,
                prevalence: if y.is_empty() { 0.0 } else { cases as f64 / y.len() as f64 },
                at_threshold: metrics_at_threshold(&s, &y, threshold).ok(),
                auprc: auprc(&s, &y).ok(),
                separation: separation(preds, d),
                risk_curve_spearman: meta.and_then(|m| risk_curve(preds, d, m, bins)).and_then(|c| curve_spearman(&c)),
            }
        })
        .collect()
}

fn optional_meta(cfg: &RunConfig) -> Result<Option<BTreeMap<String, crate::CohortMeta>>> {
    let path = cfg.metadata_path();
    if path.exists() {
        Ok(Some(load_meta(&path)?))
    } else {
        log::warn!("{} missing; skipping metadata analyses", path.display());
        Ok(None)
    }
}

pub fn compute_metrics(cfg: &RunConfig) -> Result<MetricsReport> {
    let preds = load_predictions(cfg)?;
    let meta = optional_meta(cfg)?;
    let e = &cfg.evaluation;
    let folds: BTreeSet<usize> = preds.folds.iter().copied().collect();
    Ok(MetricsReport {
        threshold: e.threshold,
        phenotypes: phenotype_metrics(&preds, e.threshold, meta.as_ref(), e.curve_bins),
        per_fold: folds
            .into_iter()
            .map(|f| (f, phenotype_metrics(&preds.fold_subset(f), e.threshold, meta.as_ref(), e.curve_bins)))
            .collect(),
    })
}

/// Metrics report plus one risk-score curve per phenotype.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let report = compute_metrics(cfg)?;
    let metrics_path = cfg.artifact("metrics.json");
    write_json(&metrics_path, &report)?;
    let mut out = vec![metrics_path];
    if let Some(meta) = optional_meta(cfg)? {
        let preds = load_predictions(cfg)?;
        for d in 0..preds.phenotype_ids.len() {
            if let Some(curve) = risk_curve(&preds, d, &meta, cfg.evaluation.curve_bins) {
                let path = cfg.artifact(&format!("risk-curve-{}.tsv", preds.phenotype_ids[d]));
                write_xy_tsv(("percentile", "median_probability"), &curve, &path).map_err(|e| Error::io(&path, e))?;
                out.push(path);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissedCase {
    pub phenotype_id: String,
    pub patient_id: String,
    pub probability: f64,
}

pub fn missed_cases(cfg: &RunConfig, preds: &PredictionSet) -> Result<Vec<MissedCase>> {
    let mut out = Vec::new();
    for d in 0..preds.phenotype_ids.len() {
        let ids = expand_cohort(preds, d, cfg.evaluation.expansion_percentile)?;
        let mut rows: Vec<MissedCase> = ids
            .into_iter()
            .map(|pid| {
                let i = preds.patient_ids.iter().position(|p| *p == pid).expect("id from the same set");
                MissedCase {
                    phenotype_id: preds.phenotype_ids[d].clone(),
                    patient_id: pid,
                    probability: preds.probabilities[i][d],
                }
            })
            .collect();
        rows.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.patient_id.cmp(&b.patient_id)));
        out.extend(rows);
    }
    Ok(out)
}

/// High-probability controls per phenotype.
pub fn expand(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let preds = load_predictions(cfg)?;
    let rows = missed_cases(cfg, &preds)?;
    let mut text = String::from("phenotype_id\tpatient_id\tprobability\n");
    for r in &rows {
        text.push_str(&format!("{}\t{}\t{:.17e}\n", r.phenotype_id, r.patient_id, r.probability));
    }
    let path = cfg.artifact("missed-cases.tsv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(vec![path])
}

/// Biomarker comparison between the high- and low-probability case groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerComparison {
    pub biomarker: String,
    pub cases_high_mean: f64,
    pub cases_low_mean: f64,
    pub p_greater: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeReport {
    pub phenotype_id: String,
    pub groups: Vec<GroupSummary>,
    pub biomarker: Option<BiomarkerComparison>,
    pub missed_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_sha256: String,
    pub metrics: MetricsReport,
    pub phenotypes: Vec<PhenotypeReport>,
}

pub fn biomarker_comparison(
    preds: &PredictionSet,
    d: usize,
    meta: &BTreeMap<String, crate::CohortMeta>,
    settings: &EvalSettings,
) -> Result<Option<BiomarkerComparison>> {
    let groups = define_groups(preds, d, &settings.percentiles)?;
    let values = |rows: &[usize]| -> Vec<f64> {
        let metas = rows.iter().filter_map(|&i| meta.get(&preds.patient_ids[i]));
        aggregate_biomarker(metas, &settings.biomarker, settings.biomarker_percentile)
            .values
            .into_values()
            .collect()
    };
    let high = values(&groups.cases_high);
    let low = values(&groups.cases_low);
    let Ok(t) = welch_t_test(&high, &low) else {
        return Ok(None);
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(BiomarkerComparison {
        biomarker: settings.biomarker.clone(),
        cases_high_mean: mean(&high),
        cases_low_mean: mean(&low),
        p_greater: t.p_greater(),
    }))
}

/// Metrics, group summaries and biomarker comparisons in one document.
pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    ensure_out_dir(cfg)?;
    let preds = load_predictions(cfg)?;
    let meta = load_meta(&cfg.metadata_path())?;
    let (histories, _) = load_histories(cfg)?;
    let missed = missed_cases(cfg, &preds)?;
    let e = &cfg.evaluation;
    let mut phenotypes = Vec::new();
    for d in 0..preds.phenotype_ids.len() {
        let id = &preds.phenotype_ids[d];
        let groups = match define_groups(&preds, d, &e.percentiles) {
            Ok(g) => g,
            Err(err) => {
                log::warn!("{id}: no groups ({err})");
                continue;
            }
        };
        phenotypes.push(PhenotypeReport {
            phenotype_id: id.clone(),
            groups: group_summary(&groups, &preds, &histories, &meta, &e.biomarker, e.biomarker_percentile),
            biomarker: biomarker_comparison(&preds, d, &meta, e)?,
            missed_cases: missed.iter().filter(|m| m.phenotype_id == *id).count(),
        });
    }
    let report = Report {
        config_sha256: cfg.hash(),
        metrics: compute_metrics(cfg)?,
        phenotypes,
    };
    let path = cfg.artifact("report.json");
    write_json(&path, &report)?;
    Ok(vec![path])
}

pub const COMMANDS: [&str; 8] = ["synth", "preprocess", "build-vocab", "pretrain", "train", "evaluate", "expand", "report"];

/// Runs one stage by name and writes its manifest.
pub fn run_stage(cfg: &RunConfig, command: &str) -> Result<Manifest> {
    cfg.validate()?;
    let outputs = match command {
        "synth" => synth(cfg)?,
        "preprocess" => preprocess(cfg)?,
        "build-vocab" => build_vocab(cfg)?,
        "pretrain" => pretrain(cfg)?,
        "train" => train(cfg)?,
        "evaluate" => evaluate(cfg)?,
        "expand" => expand(cfg)?,
        "report" => report(cfg)?,
        other => return Err(Error::Config(format!("unknown command {other}"))),
    };
    write_manifest(cfg, command, &outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("train.cls_lr", "0.001").unwrap();
        c.set("model.hidden_dim", "32").unwrap();
        c.set("paths.out_dir", "/tmp/x").unwrap();
        c.set("evaluation.biomarker", "ldl").unwrap();
        assert_eq!(c.train.cls_lr, 0.001);
        assert_eq!(c.model.hidden_dim, 32);
        assert_eq!(c.out_dir(), PathBuf::from("/tmp/x"));
        assert_eq!(c.evaluation.biomarker, "ldl");
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("train.cls_lr", "\"fast\"").is_err());
    }

    #[test]
    fn seed_resolution_and_hash() {
        let mut c = RunConfig::default();
        c.seed = 7;
        let r = c.resolved();
        assert_eq!((r.masking.seed, r.mlm.seed, r.train.seed), (7, 7, 7));
        let h = c.hash();
        c.seed = 8;
        assert_ne!(h, c.hash());
        assert_eq!(h.len(), 64);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "model": {"hidden_dim": 64}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.hidden_dim, 64);
        assert_eq!(c.model.num_layers, ModelConfig::default().num_layers);
        assert!(RunConfig::from_json("{\"seed\": \"x\"}").is_err());
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.folds.models = vec![9];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.paths.out_dir = Some(dir.path().to_path_buf());
        c.synth.n_patients = 60;
        c.synth.n_concepts = 60;
        c.model.hidden_dim = 16;
        c.model.num_heads = 2;
        c.model.feedforward_dim = 32;
        c.model.num_layers = 1;
        c.model.max_tokens = 128;
        c.train.mlm_epochs = 1;
        c.train.cls_epochs = 1;
        c.train.batch_size = 16;
        c.folds.models = vec![0];
        c.train.rho_max = Some(20.0);
        for cmd in COMMANDS {
            run_stage(&c, cmd).unwrap_or_else(|e| panic!("{cmd}: {e}"));
            assert!(manifest_path(&c, cmd).exists());
        }
        let preds = load_predictions(&c).unwrap();
        assert!(preds.folds.iter().all(|&f| f == 1));
        let missed = std::fs::read_to_string(c.artifact("missed-cases.tsv")).unwrap();
        for line in missed.lines().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let d = preds.phenotype_index(f[0]).unwrap();
            let i = preds.patient_ids.iter().position(|p| p == f[1]).unwrap();
            assert_eq!(preds.labels[i][d], 0);
        }
    }
}
