//! Synthetic cohorts with injected phenotype signal.
//!
//! The toy catalog has two terminologies whose codes never overlap: an
//! ICD-like hospital terminology with hierarchical codes (`E11`, `E11.2`)
//! and a Read-like primary-care terminology with five-character codes
//! (`C10..`, `C10F.`). Each of the four toy phenotypes owns one subtree in
//! each terminology. Other concepts serve as background, as correlated
//! background (untagged codes that cases carry more often) or as risk
//! markers whose frequency follows a latent liability and, in cases, severity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Concept, ConceptKey, MatchCode, OntologyCatalog, PhenotypeDefinition};
use crate::records::{ClinicalEvent, CohortMeta, Measurement, Sex, Source};
use crate::rng::StreamRng;
use crate::stream_rng;

pub const HOSPITAL_ONTOLOGY: &str = "ICDX";
pub const GP_ONTOLOGY: &str = "READX";
pub const MIN_TOY_CONCEPTS: usize = 50;
pub const CORRELATED_PER_PHENOTYPE: usize = 4;
pub const MARKERS_PER_PHENOTYPE: usize = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    ConfigInvalid(String),
}

struct ToyPhenotype {
    id: &'static str,
    name: &'static str,
    icd_root: &'static str,
    read_root: &'static str,
    icd_terms: [&'static str; 3],
    read_terms: [&'static str; 2],
    correlated: [&'static str; CORRELATED_PER_PHENOTYPE],
    markers: [&'static str; MARKERS_PER_PHENOTYPE],
}

const TOY_PHENOTYPES: [ToyPhenotype; 4] = [
    ToyPhenotype {
        id: "T2D",
        name: "type 2 diabetes",
        icd_root: "E11",
        read_root: "C10",
        icd_terms: [
            "type 2 diabetes mellitus",
            "type 2 diabetes mellitus with renal complications",
            "type 2 diabetes mellitus with ophthalmic complications",
        ],
        read_terms: ["diabetes mellitus", "type 2 diabetes mellitus on insulin"],
        correlated: ["obesity", "essential hypertension", "polyuria", "retinal screening attended"],
        markers: ["raised body mass index"],
    },
    ToyPhenotype {
        id: "HF",
        name: "heart failure",
        icd_root: "I50",
        read_root: "G58",
        icd_terms: [
            "heart failure",
            "congestive heart failure",
            "left ventricular failure",
        ],
        read_terms: ["heart failure", "cardiac failure with reduced ejection fraction"],
        correlated: ["ankle oedema", "atrial fibrillation", "orthopnoea", "loop diuretic review"],
        markers: ["breathlessness on exertion"],
    },
    ToyPhenotype {
        id: "AST",
        name: "asthma",
        icd_root: "J45",
        read_root: "H33",
        icd_terms: ["asthma", "predominantly allergic asthma", "acute severe asthma"],
        read_terms: ["asthma", "exercise induced asthma"],
        correlated: ["wheeze", "allergic rhinitis", "peak flow monitoring", "inhaler technique review"],
        markers: ["nocturnal cough"],
    },
    ToyPhenotype {
        id: "CKD",
        name: "chronic kidney disease",
        icd_root: "N18",
        read_root: "K05",
        icd_terms: [
            "chronic kidney disease",
            "chronic kidney disease stage 3",
            "end stage renal disease",
        ],
        read_terms: ["chronic renal impairment", "chronic kidney disease stage 4"],
        correlated: ["proteinuria", "renal anaemia", "raised potassium", "nephrology referral"],
        markers: ["reduced urine output"],
    },
];

const MODIFIERS: [&str; 24] = [
    "acute", "chronic", "recurrent", "mild", "severe", "unspecified", "bilateral", "left", "right",
    "primary", "secondary", "benign", "suspected", "history of", "minor", "persistent", "intermittent",
    "localised", "generalised", "traumatic", "infective", "postoperative", "congenital", "seasonal",
];

const FINDINGS: [&str; 36] = [
    "pain", "swelling", "inflammation", "infection", "lesion", "cyst", "fracture", "sprain", "rash",
    "ulcer", "stenosis", "obstruction", "haemorrhage", "dysfunction", "deformity", "strain", "abscess",
    "dermatitis", "neuropathy", "laceration", "contusion", "polyp", "effusion", "spasm", "hernia",
    "insufficiency", "erosion", "nodule", "calculus", "tear", "dislocation", "stiffness", "numbness",
    "discharge", "itching", "weakness",
];

const SITES: [&str; 30] = [
    "of knee", "of shoulder", "of lower back", "of neck", "of ankle", "of wrist", "of hip", "of foot",
    "of hand", "of elbow", "of ear", "of eye", "of skin", "of chest wall", "of abdomen", "of bladder",
    "of stomach", "of colon", "of liver", "of throat", "of nose", "of sinus", "of tooth", "of scalp",
    "of thyroid", "of spine", "of pelvis", "of jaw", "of tendon", "of lymph node",
];

/// Roles of the toy catalog's concepts, per phenotype in definition order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogLayout {
    pub signal: Vec<Vec<ConceptKey>>,
    pub correlated: Vec<Vec<ConceptKey>>,
    pub markers: Vec<Vec<ConceptKey>>,
    pub background: Vec<ConceptKey>,
}

#[derive(Debug, Clone)]
pub struct ToyCatalog {
    pub catalog: OntologyCatalog,
    pub definitions: Vec<PhenotypeDefinition>,
    pub layout: CatalogLayout,
}

impl ToyCatalog {
    pub fn write(&self, catalog_path: &Path, definitions_path: &Path) -> crate::Result<()> {
        self.catalog.write_tsv(catalog_path)?;
        crate::ontology::write_phenotype_definitions(definitions_path, &self.definitions)?;
        Ok(())
    }
}

/// Every word a toy description can contain.
pub fn word_bank() -> Vec<&'static str> {
    let mut words = BTreeSet::new();
    let phrases = MODIFIERS.iter().chain(&FINDINGS).chain(&SITES).copied().chain(
        TOY_PHENOTYPES
            .iter()
            .flat_map(|p| {
                p.icd_terms
                    .iter()
                    .chain(&p.read_terms)
                    .chain(&p.correlated)
                    .chain(&p.markers)
                    .copied()
            }),
    );
    for phrase in phrases {
        words.extend(phrase.split_whitespace());
    }
    words.into_iter().collect()
}

fn background_code(ontology_idx: usize, serial: usize) -> String {
    // Leading letters avoid every phenotype root in that terminology.
    const ICD_LETTERS: &[u8] = b"ABDFGHKLMRSZ";
    const READ_LETTERS: &[u8] = b"ABDEFMNRSZ";
    if ontology_idx == 0 {
        let letter = ICD_LETTERS[serial / 100 % ICD_LETTERS.len()] as char;
        let stem = serial % 100;
        match serial / (100 * ICD_LETTERS.len()) {
            0 => format!("{letter}{stem:02}"),
            k => format!("{letter}{stem:02}.{}", k - 1),
        }
    } else {
        let letter = READ_LETTERS[serial / 100 % READ_LETTERS.len()] as char;
        let stem = serial % 100;
        match serial / (100 * READ_LETTERS.len()) {
            0 => format!("{letter}{stem:02}.."),
            k => format!("{letter}{stem:02}{}.", (b'a' + (k - 1) as u8 % 26) as char),
        }
    }
}

/// Builds a two-terminology toy catalog of `n_concepts` concepts and four
/// phenotype definitions.
pub fn generate_toy_catalog(n_concepts: usize, seed: u64) -> Result<ToyCatalog, SynthError> {
    if n_concepts < MIN_TOY_CONCEPTS {
        return Err(SynthError::ConfigInvalid(format!(
            "toy catalog needs at least {MIN_TOY_CONCEPTS} concepts, got {n_concepts}"
        )));
    }
    let mut rng = stream_rng!(seed, "toy-catalog");
    let mut concepts = Vec::new();
    let mut definitions = Vec::new();
    let mut layout = CatalogLayout {
        signal: Vec::new(),
        correlated: Vec::new(),
        markers: Vec::new(),
        background: Vec::new(),
    };
    for p in &TOY_PHENOTYPES {
        let mut keys = Vec::new();
        for (k, term) in p.icd_terms.iter().enumerate() {
            let code = if k == 0 { p.icd_root.to_string() } else { format!("{}.{}", p.icd_root, k) };
            keys.push(ConceptKey::new(HOSPITAL_ONTOLOGY, &code));
            concepts.push(Concept { key: ConceptKey::new(HOSPITAL_ONTOLOGY, &code), description: term.to_string() });
        }
        for (k, term) in p.read_terms.iter().enumerate() {
            let code = if k == 0 { format!("{}..", p.read_root) } else { format!("{}{}.", p.read_root, (b'E' + k as u8) as char) };
            keys.push(ConceptKey::new(GP_ONTOLOGY, &code));
            concepts.push(Concept { key: ConceptKey::new(GP_ONTOLOGY, &code), description: term.to_string() });
        }
        layout.signal.push(keys);
        definitions.push(PhenotypeDefinition {
            phenotype_id: p.id.to_string(),
            name: p.name.to_string(),
            codes: vec![
                MatchCode::new(HOSPITAL_ONTOLOGY, p.icd_root, true),
                MatchCode::new(GP_ONTOLOGY, p.read_root, true),
            ],
        });
    }

    // Correlated and marker concepts get fixed descriptions; the rest are
    // random word-bank phrases. Alternating terminologies means every role
    // list spans both.
    let curated: Vec<(usize, bool, &str)> = TOY_PHENOTYPES
        .iter()
        .enumerate()
        .flat_map(|(d, p)| p.correlated.iter().map(move |t| (d, true, *t)))
        .chain(
            TOY_PHENOTYPES
                .iter()
                .enumerate()
                .flat_map(|(d, p)| p.markers.iter().map(move |t| (d, false, *t))),
        )
        .collect();
    layout.correlated = vec![Vec::new(); TOY_PHENOTYPES.len()];
    layout.markers = vec![Vec::new(); TOY_PHENOTYPES.len()];
    let n_other = n_concepts - concepts.len();
    let mut used: BTreeSet<String> = curated.iter().map(|c| c.2.to_string()).collect();
    let mut serial = [0usize; 2];
    for i in 0..n_other {
        let o = i % 2;
        let ontology = if o == 0 { HOSPITAL_ONTOLOGY } else { GP_ONTOLOGY };
        let key = ConceptKey::new(ontology, background_code(o, serial[o]));
        serial[o] += 1;
        let description = match curated.get(i) {
            Some(&(d, is_correlated, term)) => {
                if is_correlated {
                    layout.correlated[d].push(key.clone());
                } else {
                    layout.markers[d].push(key.clone());
                }
                term.to_string()
            }
            None => {
                let d = loop {
                    let d = format!(
                        "{} {} {}",
                        MODIFIERS.choose(&mut rng).expect("non-empty"),
                        FINDINGS.choose(&mut rng).expect("non-empty"),
                        SITES.choose(&mut rng).expect("non-empty")
                    );
                    if used.insert(d.clone()) {
                        break d;
                    }
                };
                layout.background.push(key.clone());
                d
            }
        };
        concepts.push(Concept { key, description });
    }
    let catalog = OntologyCatalog::from_concepts(concepts).map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;
    Ok(ToyCatalog { catalog, definitions, layout })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeSpec {
    pub phenotype_id: String,
    pub prevalence: f64,
    /// Concepts the phenotype's oracle tags; cases receive some of them.
    pub signal: Vec<ConceptKey>,
    /// Untagged concepts carried by cases with probability `strength`.
    pub correlated: Vec<ConceptKey>,
    /// Untagged concepts whose rate grows with the latent liability.
    pub markers: Vec<ConceptKey>,
    pub strength: f64,
    /// Inclusive range of signal events per case.
    pub signal_events: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerSpec {
    pub name: String,
    pub unit: String,
    pub phenotype: usize,
    pub control_mean: f64,
    /// Case means run from `case_mean_low` to `case_mean_high` with severity.
    pub case_mean_low: f64,
    pub case_mean_high: f64,
    pub sd: f64,
    pub measurements: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub phenotypes: Vec<PhenotypeSpec>,
    /// Symmetric odds multipliers between phenotype statuses.
    pub comorbidity: Vec<Vec<f64>>,
    /// Mean number of background events per patient.
    pub background_rate: f64,
    /// Log-odds slope of status on the latent liability.
    pub liability_effect: f64,
    /// Per-concept probability that anyone carries a correlated concept.
    pub leak_rate: f64,
    /// Mean count of each marker concept at zero liability.
    pub marker_rate: f64,
    /// Standard deviation of the noise added to liability in risk scores.
    pub risk_noise: f64,
    /// Yearly baseline death hazard.
    pub base_hazard: f64,
    pub biomarker: Option<BiomarkerSpec>,
    /// Which terminology is recorded by hospitals; all others are GP.
    pub hospital_ontology: String,
    pub start_year: i32,
    pub end_year: i32,
    pub min_events: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Four phenotypes at prevalences 0.12/0.05/0.03/0.03 over the toy
    /// catalog, with HbA1c tied to the first.
    pub fn desk_default(layout: &CatalogLayout, defs: &[PhenotypeDefinition], n_patients: usize, seed: u64) -> Self {
        let prevalences = [0.12, 0.05, 0.03, 0.03];
        let phenotypes = defs
            .iter()
            .enumerate()
            .map(|(d, def)| PhenotypeSpec {
                phenotype_id: def.phenotype_id.clone(),
                prevalence: prevalences[d % prevalences.len()],
                signal: layout.signal[d].clone(),
                correlated: layout.correlated[d].clone(),
                markers: layout.markers[d].clone(),
                strength: 0.8,
                signal_events: (1, 3),
            })
            .collect::<Vec<_>>();
        let n = phenotypes.len();
        let mut comorbidity = vec![vec![1.0; n]; n];
        let mut link = |a: usize, b: usize, m: f64| {
            if a < n && b < n {
                comorbidity[a][b] = m;
                comorbidity[b][a] = m;
            }
        };
        link(0, 1, 2.0);
        link(0, 3, 2.5);
        link(1, 3, 1.5);
        Self {
            n_patients,
            phenotypes,
            comorbidity,
            background_rate: 12.0,
            liability_effect: 1.5,
            leak_rate: 0.02,
            marker_rate: 1.0,
            risk_noise: 0.3,
            base_hazard: 0.01,
            biomarker: Some(BiomarkerSpec {
                name: "hba1c".into(),
                unit: "mmol/mol".into(),
                phenotype: 0,
                control_mean: 37.0,
                case_mean_low: 45.0,
                case_mean_high: 65.0,
                sd: 5.0,
                measurements: (3, 6),
            }),
            hospital_ontology: HOSPITAL_ONTOLOGY.into(),
            start_year: 2000,
            end_year: 2019,
            min_events: 5,
            seed,
        }
    }

    pub fn validate(&self, catalog: &OntologyCatalog, defs: &[PhenotypeDefinition]) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        let n = self.phenotypes.len();
        if self.n_patients == 0 || n == 0 {
            return bad("need at least one patient and one phenotype".into());
        }
        if defs.len() != n {
            return bad(format!("{n} phenotype specs but {} definitions", defs.len()));
        }
        if self.comorbidity.len() != n || self.comorbidity.iter().any(|r| r.len() != n) {
            return bad("comorbidity matrix must be square over the phenotypes".into());
        }
        for a in 0..n {
            for b in 0..n {
                let m = self.comorbidity[a][b];
                if !(m > 0.0 && m.is_finite()) || m != self.comorbidity[b][a] {
                    return bad("comorbidity matrix must be symmetric with positive entries".into());
                }
            }
        }
        let rates = [
            ("background_rate", self.background_rate),
            ("leak_rate", self.leak_rate),
            ("marker_rate", self.marker_rate),
            ("risk_noise", self.risk_noise),
            ("base_hazard", self.base_hazard),
            ("liability_effect", self.liability_effect),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.leak_rate >= 1.0 {
            return bad("leak_rate must be below 1".into());
        }
        if self.end_year < self.start_year + 4 {
            return bad("the date range must span at least five years".into());
        }
        let tagged = |key: &ConceptKey| {
            catalog
                .get(key)
                .map(|c| defs.iter().enumerate().filter(|(_, d)| d.indicator(c)).map(|(i, _)| i).collect::<Vec<_>>())
        };
        for (d, spec) in self.phenotypes.iter().enumerate() {
            let id = &spec.phenotype_id;
            if defs[d].phenotype_id != *id {
                return bad(format!("spec {d} is {id} but definition {d} is {}", defs[d].phenotype_id));
            }
            if !(spec.prevalence > 0.0 && spec.prevalence < 1.0) {
                return bad(format!("{id}: prevalence must lie in (0, 1)"));
            }
            if !(0.0..=1.0).contains(&spec.strength) {
                return bad(format!("{id}: association strength must lie in [0, 1]"));
            }
            let (lo, hi) = spec.signal_events;
            if lo > hi || (hi > 0 && spec.signal.is_empty()) {
                return bad(format!("{id}: bad signal event range"));
            }
            for key in &spec.signal {
                match tagged(key) {
                    None => return bad(format!("{id}: signal concept {key} not in catalog")),
                    Some(t) if t != [d] => return bad(format!("{id}: signal concept {key} must be tagged by {id} only")),
                    _ => {}
                }
            }
            for key in spec.correlated.iter().chain(&spec.markers) {
                match tagged(key) {
                    None => return bad(format!("{id}: concept {key} not in catalog")),
                    Some(t) if !t.is_empty() => return bad(format!("{id}: background concept {key} is tagged by an oracle")),
                    _ => {}
                }
            }
        }
        if let Some(b) = &self.biomarker {
            if b.phenotype >= n || b.measurements.0 > b.measurements.1 || !(b.sd >= 0.0) {
                return bad("invalid biomarker spec".into());
            }
        }
        Ok(())
    }
}

/// A generated cohort plus the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub events: Vec<ClinicalEvent>,
    pub meta: Vec<CohortMeta>,
    pub status: Vec<Vec<u8>>,
    pub liability: Vec<Vec<f64>>,
    pub severity: Vec<Vec<f64>>,
}

impl SynthCohort {
    pub fn patient_ids(&self) -> Vec<&str> {
        self.meta.iter().map(|m| m.patient_id.as_str()).collect()
    }

    pub fn write(&self, events_path: &Path, meta_path: &Path) -> crate::Result<()> {
        crate::records::write_events(events_path, &self.events)?;
        crate::records::write_meta(meta_path, &self.meta)?;
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::encoder::sigmoid(x)
}

/// Intercept giving exactly `target` statuses for thresholds `u < σ(c + off)`.
fn calibrate_intercept(u: &[f64], offset: &[f64], target: usize) -> f64 {
    let count = |c: f64| u.iter().zip(offset).filter(|(&u, &o)| u < sigmoid(c + o)).count();
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let k = count(mid);
        if k == target {
            return mid;
        }
        if k < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn random_date(rng: &mut StreamRng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = (to - from).num_days().max(0) as u64;
    from + Days::new(rng.random_range(0..=span))
}

/// Generates a cohort from one seeded stream.
///
/// Statuses are assigned phenotype by phenotype. Each phenotype's log-odds
/// is `c + β·ℓ` plus the log odds multipliers of the statuses already
/// drawn, and the intercept `c` is calibrated so the realized case count is
/// `round(prevalence · n)`.
pub fn generate_cohort(
    cfg: &SynthConfig,
    catalog: &OntologyCatalog,
    defs: &[PhenotypeDefinition],
) -> Result<SynthCohort, SynthError> {
    cfg.validate(catalog, defs)?;
    let n = cfg.n_patients;
    let nd = cfg.phenotypes.len();
    let mut rng = stream_rng!(cfg.seed, "synth-cohort");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let liability: Vec<Vec<f64>> = (0..n).map(|_| (0..nd).map(|_| std_normal.sample(&mut rng)).collect()).collect();
    let severity: Vec<Vec<f64>> = (0..n).map(|_| (0..nd).map(|_| rng.random::<f64>()).collect()).collect();
    let mut status = vec![vec![0u8; nd]; n];
    for d in 0..nd {
        let u: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let offset: Vec<f64> = (0..n)
            .map(|i| {
                let comorbid: f64 = (0..d).filter(|&e| status[i][e] == 1).map(|e| cfg.comorbidity[d][e].ln()).sum();
                cfg.liability_effect * liability[i][d] + comorbid
            })
            .collect();
        let target = ((cfg.phenotypes[d].prevalence * n as f64).round() as usize).max(1);
        let c = calibrate_intercept(&u, &offset, target);
        for i in 0..n {
            status[i][d] = u8::from(u[i] < sigmoid(c + offset[i]));
        }
    }

    let background: Vec<&Concept> = {
        let reserved: BTreeSet<&ConceptKey> = cfg
            .phenotypes
            .iter()
            .flat_map(|p| p.signal.iter().chain(&p.correlated).chain(&p.markers))
            .collect();
        catalog
            .concepts()
            .filter(|c| !reserved.contains(&c.key) && !defs.iter().any(|d| d.indicator(c)))
            .collect()
    };
    if background.is_empty() {
        return Err(SynthError::ConfigInvalid("catalog has no untagged background concepts".into()));
    }
    let source_of = |key: &ConceptKey| {
        if key.ontology_id == cfg.hospital_ontology {
            Source::Hospital
        } else {
            Source::Gp
        }
    };

    let start = NaiveDate::from_ymd_opt(cfg.start_year, 1, 1).expect("valid year");
    let end = NaiveDate::from_ymd_opt(cfg.end_year, 12, 31).expect("valid year");
    let latest_entry = NaiveDate::from_ymd_opt(cfg.end_year - 4, 12, 31).expect("valid year");
    let bg_count = Poisson::new(cfg.background_rate.max(1e-9)).map_err(|e| SynthError::ConfigInvalid(e.to_string()))?;

    let mut events = Vec::new();
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let pid = format!("P{:05}", i + 1);
        let entry = random_date(&mut rng, start, latest_entry);

        let mut log_hazard = cfg.base_hazard.max(1e-12).ln();
        for d in 0..nd {
            log_hazard += 0.25 * liability[i][d];
            if status[i][d] == 1 {
                log_hazard += 0.4 + 0.8 * severity[i][d];
            }
        }
        let years: f64 = Exp::new(log_hazard.exp()).expect("positive rate").sample(&mut rng);
        let death = entry
            .checked_add_days(Days::new((years * 365.25).min(1e6) as u64))
            .filter(|&dd| dd < end);
        let last_followup = death.unwrap_or(end);
        // Guarantee a little history before death.
        let window_end = last_followup.max(entry);

        let mut patient: Vec<(NaiveDate, ConceptKey)> = Vec::new();
        let n_bg = bg_count.sample(&mut rng) as usize;
        for _ in 0..n_bg {
            let c = background.choose(&mut rng).expect("non-empty");
            patient.push((random_date(&mut rng, entry, window_end), c.key.clone()));
        }
        for (d, spec) in cfg.phenotypes.iter().enumerate() {
            let l = liability[i][d];
            if status[i][d] == 1 && spec.signal_events.1 > 0 {
                let k = rng.random_range(spec.signal_events.0..=spec.signal_events.1);
                for _ in 0..k {
                    let key = spec.signal.choose(&mut rng).expect("non-empty");
                    patient.push((random_date(&mut rng, entry, window_end), key.clone()));
                }
            }
            let leak = (cfg.leak_rate * (spec.strength * l).exp()).min(0.9);
            for key in &spec.correlated {
                let p_case = if status[i][d] == 1 { spec.strength } else { 0.0 };
                let from_case = rng.random::<f64>() < p_case;
                let from_leak = rng.random::<f64>() < leak;
                if from_case || from_leak {
                    let repeats = if from_case {
                        1 + Binomial::new(2, spec.strength * severity[i][d]).expect("valid p").sample(&mut rng)
                    } else {
                        1
                    };
                    for _ in 0..repeats {
                        patient.push((random_date(&mut rng, entry, window_end), key.clone()));
                    }
                }
            }
            if cfg.marker_rate > 0.0 {
                // Cases with more severe disease see the markers more often.
                let drive = if status[i][d] == 1 { l + 2.0 * severity[i][d] } else { l };
                let rate = Poisson::new(cfg.marker_rate * (spec.strength * drive).exp()).expect("positive rate");
                for key in &spec.markers {
                    let k = rate.sample(&mut rng) as usize;
                    for _ in 0..k {
                        patient.push((random_date(&mut rng, entry, window_end), key.clone()));
                    }
                }
            }
        }
        while patient.len() < cfg.min_events {
            let c = background.choose(&mut rng).expect("non-empty");
            patient.push((random_date(&mut rng, entry, window_end), c.key.clone()));
        }
        patient.sort_by(|a, b| a.0.cmp(&b.0));
        events.extend(patient.into_iter().map(|(date, key)| ClinicalEvent {
            patient_id: pid.clone(),
            date,
            source: source_of(&key),
            key,
        }));

        let mut biomarkers = BTreeMap::new();
        if let Some(b) = &cfg.biomarker {
            let mean = if status[i][b.phenotype] == 1 {
                b.case_mean_low + (b.case_mean_high - b.case_mean_low) * severity[i][b.phenotype]
            } else {
                b.control_mean
            };
            let noise = Normal::new(0.0, b.sd).expect("valid sd");
            let k = rng.random_range(b.measurements.0..=b.measurements.1);
            let mut series: Vec<Measurement> = (0..k)
                .map(|_| Measurement {
                    date: random_date(&mut rng, entry, window_end),
                    value: ((mean + noise.sample(&mut rng)) * 10.0).round() / 10.0,
                    unit: b.unit.clone(),
                })
                .collect();
            series.sort_by(|a, b| a.date.cmp(&b.date));
            biomarkers.insert(b.name.clone(), series);
        }
        let mut risk_scores = BTreeMap::new();
        for (d, spec) in cfg.phenotypes.iter().enumerate() {
            let score = liability[i][d] + cfg.risk_noise * std_normal.sample(&mut rng);
            risk_scores.insert(risk_score_name(&spec.phenotype_id), (score * 1e6).round() / 1e6);
        }
        meta.push(CohortMeta {
            patient_id: pid,
            sex: if rng.random_bool(0.5) { Sex::Female } else { Sex::Male },
            birth_year: rng.random_range(1930..=1970),
            death_date: death,
            last_followup,
            biomarkers,
            risk_scores,
        });
    }
    Ok(SynthCohort { events, meta, status, liability, severity })
}

/// Key of a phenotype's synthetic risk score in [`CohortMeta::risk_scores`].
pub fn risk_score_name(phenotype_id: &str) -> String {
    format!("{phenotype_id}_risk")
}
