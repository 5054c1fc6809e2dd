//! Patient event ingestion, hospital-visit aggregation, source fusion and
//! inclusion filters.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Concept, ConceptKey, OntologyCatalog};
use crate::tokenizer::{Vocabulary, RESERVED_SPECIALS_PER_SEQUENCE};

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: unknown source {value:?}")]
    UnknownSource { line: usize, value: String },
    #[error("patient {patient_id}: {reason}")]
    InvalidMeta { patient_id: String, reason: String },
    #[error("description {description:?} needs {tokens} tokens, budget is {max_tokens}")]
    DescriptionTooLong {
        description: String,
        tokens: usize,
        max_tokens: usize,
    },
    #[error("token budget {0} leaves no room beyond the special tokens")]
    BudgetTooSmall(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> RecordsError {
    RecordsError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "GP")]
    Gp,
    #[serde(rename = "HOSPITAL")]
    Hospital,
}

impl Source {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "GP" => Some(Source::Gp),
            "HOSPITAL" => Some(Source::Hospital),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Gp => "GP",
            Source::Hospital => "HOSPITAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalEvent {
    pub patient_id: String,
    pub date: NaiveDate,
    pub source: Source,
    pub key: ConceptKey,
}

/// One line of the event file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub date: String,
    pub source: String,
    pub ontology_id: String,
    pub code: String,
}

impl From<&ClinicalEvent> for EventRecord {
    fn from(e: &ClinicalEvent) -> Self {
        EventRecord {
            patient_id: e.patient_id.clone(),
            date: e.date.format("%Y-%m-%d").to_string(),
            source: e.source.as_str().to_string(),
            ontology_id: e.key.ontology_id.clone(),
            code: e.key.code.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientHistory {
    pub patient_id: String,
    /// Sorted by date; ties keep input order.
    pub events: Vec<ClinicalEvent>,
}

impl PatientHistory {
    pub fn count(&self, source: Source) -> usize {
        self.events.iter().filter(|e| e.source == source).count()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.events.iter().map(|e| e.date).min()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub histories: BTreeMap<String, PatientHistory>,
    /// Events whose concept key is not in the catalog.
    pub dropped: usize,
}

pub fn parse_events(text: &str, catalog: &OntologyCatalog) -> Result<Ingested, RecordsError> {
    let mut out = Ingested::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: EventRecord =
            serde_json::from_str(raw).map_err(|e| RecordsError::MalformedLine {
                line,
                message: e.to_string(),
            })?;
        let source = Source::parse(&rec.source).ok_or_else(|| RecordsError::UnknownSource {
            line,
            value: rec.source.clone(),
        })?;
        let date = NaiveDate::parse_from_str(rec.date.trim(), "%Y-%m-%d").map_err(|e| {
            RecordsError::MalformedLine {
                line,
                message: format!("date {:?}: {e}", rec.date),
            }
        })?;
        let key = ConceptKey::new(&rec.ontology_id, &rec.code);
        if catalog.get(&key).is_none() {
            log::warn!("line {line}: dropping event with unknown concept {key}");
            out.dropped += 1;
            continue;
        }
        let patient_id = rec.patient_id.trim().to_string();
        out.histories
            .entry(patient_id.clone())
            .or_insert_with(|| PatientHistory {
                patient_id: patient_id.clone(),
                events: Vec::new(),
            })
            .events
            .push(ClinicalEvent {
                patient_id,
                date,
                source,
                key,
            });
    }
    for history in out.histories.values_mut() {
        history.events.sort_by_key(|e| e.date);
    }
    Ok(out)
}

pub fn ingest_events(path: &Path, catalog: &OntologyCatalog) -> Result<Ingested, RecordsError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_events(&text, catalog)
}

pub fn write_events<'a>(
    path: &Path,
    events: impl IntoIterator<Item = &'a ClinicalEvent>,
) -> Result<(), RecordsError> {
    let mut out = Vec::new();
    for e in events {
        let rec = EventRecord::from(e);
        serde_json::to_writer(&mut out, &rec).expect("event serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Merges hospital admissions less than `window_days` apart into one visit.
///
/// Consecutive admission dates chain: a visit keeps absorbing the next
/// admission while the gap to the previous admission is below the window.
/// The merged visit is dated at its earliest admission and keeps the first
/// occurrence of each concept. GP events are left as they are.
pub fn aggregate_hospital_visits(history: &PatientHistory, window_days: i64) -> PatientHistory {
    let window_days = window_days.max(1);
    let mut admission_dates: Vec<NaiveDate> = history
        .events
        .iter()
        .filter(|e| e.source == Source::Hospital)
        .map(|e| e.date)
        .collect();
    admission_dates.sort();
    admission_dates.dedup();

    // admission date -> visit date
    let mut visit_of = BTreeMap::new();
    let mut current: Option<(NaiveDate, NaiveDate)> = None;
    for date in admission_dates {
        let visit_date = match current {
            Some((start, last)) if (date - last).num_days() < window_days => start,
            _ => date,
        };
        current = Some((visit_date, date));
        visit_of.insert(date, visit_date);
    }

    let mut hospital: Vec<&ClinicalEvent> = history
        .events
        .iter()
        .filter(|e| e.source == Source::Hospital)
        .collect();
    hospital.sort_by_key(|e| e.date);
    let mut seen: HashSet<(NaiveDate, &ConceptKey)> = HashSet::new();
    let mut events: Vec<ClinicalEvent> = history
        .events
        .iter()
        .filter(|e| e.source == Source::Gp)
        .cloned()
        .collect();
    for e in hospital {
        let visit = visit_of[&e.date];
        if seen.insert((visit, &e.key)) {
            events.push(ClinicalEvent {
                date: visit,
                ..e.clone()
            });
        }
    }
    events.sort_by_key(|e| (e.date, e.source));
    PatientHistory {
        patient_id: history.patient_id.clone(),
        events,
    }
}

/// One entry of a fused description paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedEntry {
    pub concept: Concept,
    pub date: NaiveDate,
    pub source: Source,
}

impl FusedEntry {
    pub fn description(&self) -> &str {
        &self.concept.description
    }
}

/// Time-ordered list of concept descriptions.
pub type DescriptionSequence = Vec<FusedEntry>;

/// Fuses GP and hospital events into one description sequence ordered by
/// date; on equal dates GP entries come first.
pub fn fuse_histories(history: &PatientHistory, catalog: &OntologyCatalog) -> DescriptionSequence {
    let mut entries: Vec<FusedEntry> = history
        .events
        .iter()
        .filter_map(|e| {
            catalog.get(&e.key).map(|c| FusedEntry {
                concept: c.clone(),
                date: e.date,
                source: e.source,
            })
        })
        .collect();
    entries.sort_by_key(|e| (e.date, e.source));
    entries
}

/// Keeps patients with at least `min_terms` entries; returns the excluded count.
pub fn filter_min_terms(
    histories: BTreeMap<String, DescriptionSequence>,
    min_terms: usize,
) -> (BTreeMap<String, DescriptionSequence>, usize) {
    let before = histories.len();
    let kept: BTreeMap<_, _> = histories
        .into_iter()
        .filter(|(_, seq)| seq.len() >= min_terms)
        .collect();
    let excluded = before - kept.len();
    (kept, excluded)
}

/// Packs whole descriptions greedily into chunks whose encoding (with the
/// sequence specials) fits `max_tokens`. Descriptions are never split or
/// dropped; an empty sequence yields a single empty chunk.
pub fn split_overlong(
    sequence: &[FusedEntry],
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<Vec<DescriptionSequence>, RecordsError> {
    if max_tokens <= RESERVED_SPECIALS_PER_SEQUENCE {
        return Err(RecordsError::BudgetTooSmall(max_tokens));
    }
    let budget = max_tokens - RESERVED_SPECIALS_PER_SEQUENCE;
    let mut chunks = Vec::new();
    let mut current: DescriptionSequence = Vec::new();
    let mut used = 0;
    for entry in sequence {
        let n = vocab.tokenize(entry.description()).len();
        if n > budget {
            return Err(RecordsError::DescriptionTooLong {
                description: entry.description().to_string(),
                tokens: n + RESERVED_SPECIALS_PER_SEQUENCE,
                max_tokens,
            });
        }
        if used + n > budget && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(entry.clone());
        used += n;
    }
    if !current.is_empty() || chunks.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "F")]
    Female,
    #[serde(rename = "M")]
    Male,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub date: NaiveDate,
    pub value: f64,
    pub unit: String,
}

/// Per-patient metadata used only by the downstream analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMeta {
    pub patient_id: String,
    pub sex: Sex,
    pub birth_year: i32,
    #[serde(default)]
    pub death_date: Option<NaiveDate>,
    pub last_followup: NaiveDate,
    #[serde(default)]
    pub biomarkers: BTreeMap<String, Vec<Measurement>>,
    #[serde(default)]
    pub risk_scores: BTreeMap<String, f64>,
}

impl CohortMeta {
    pub fn validate(&self) -> Result<(), RecordsError> {
        let fail = |reason: String| RecordsError::InvalidMeta {
            patient_id: self.patient_id.clone(),
            reason,
        };
        if let Some(death) = self.death_date {
            if death > self.last_followup {
                return Err(fail(format!(
                    "death date {death} after last follow-up {}",
                    self.last_followup
                )));
            }
        }
        for (name, series) in &self.biomarkers {
            if series.iter().any(|m| !m.value.is_finite()) {
                return Err(fail(format!("non-finite {name} value")));
            }
        }
        if self.risk_scores.values().any(|v| !v.is_finite()) {
            return Err(fail("non-finite risk score".into()));
        }
        Ok(())
    }
}

pub fn parse_meta(text: &str) -> Result<BTreeMap<String, CohortMeta>, RecordsError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let meta: CohortMeta =
            serde_json::from_str(raw).map_err(|e| RecordsError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        meta.validate()?;
        out.insert(meta.patient_id.clone(), meta);
    }
    Ok(out)
}

pub fn load_meta(path: &Path) -> Result<BTreeMap<String, CohortMeta>, RecordsError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_meta(&text)
}

pub fn write_meta<'a>(
    path: &Path,
    metas: impl IntoIterator<Item = &'a CohortMeta>,
) -> Result<(), RecordsError> {
    let mut out = Vec::new();
    for m in metas {
        serde_json::to_writer(&mut out, m).expect("meta serializes");
        writeln!(out).expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}
