//! Terminology catalogs and phenotype definitions.
//!
//! A catalog maps every `(ontology, code)` key to exactly one text
//! description. Phenotype definitions are curated code lists; a code may
//! match its prefix-descendants within the same ontology.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("line {line}: expected 3 tab-separated columns, found {found}")]
    MalformedRow { line: usize, found: usize },
    #[error("line {line}: empty description")]
    EmptyDescription { line: usize },
    #[error("conflicting descriptions for {key}: {first:?} vs {second:?}")]
    DuplicateConflict {
        key: ConceptKey,
        first: String,
        second: String,
    },
    #[error("phenotype definition set is empty")]
    EmptyDefinitionSet,
    #[error("malformed phenotype definition: {0}")]
    MalformedDefinition(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> OntologyError {
    OntologyError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Key of a concept: terminology identifier plus terminology-local code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptKey {
    pub ontology_id: String,
    pub code: String,
}

impl ConceptKey {
    pub fn new(ontology_id: impl AsRef<str>, code: impl AsRef<str>) -> Self {
        Self {
            ontology_id: ontology_id.as_ref().trim().to_string(),
            code: code.as_ref().trim().to_string(),
        }
    }
}

impl fmt::Display for ConceptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ontology_id, self.code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub key: ConceptKey,
    pub description: String,
}

/// All concepts across terminologies, indexed by key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OntologyCatalog {
    concepts: BTreeMap<ConceptKey, Concept>,
}

impl OntologyCatalog {
    /// Builds a catalog from rows, deduplicating identical rows.
    pub fn from_concepts(
        concepts: impl IntoIterator<Item = Concept>,
    ) -> Result<Self, OntologyError> {
        let mut catalog = OntologyCatalog::default();
        for (i, concept) in concepts.into_iter().enumerate() {
            catalog.insert(concept, i + 1)?;
        }
        Ok(catalog)
    }

    fn insert(&mut self, concept: Concept, line: usize) -> Result<(), OntologyError> {
        let description = concept.description.trim().to_string();
        if description.is_empty() {
            return Err(OntologyError::EmptyDescription { line });
        }
        let key = ConceptKey::new(&concept.key.ontology_id, &concept.key.code);
        match self.concepts.get(&key) {
            Some(existing) if existing.description == description => Ok(()),
            Some(existing) => Err(OntologyError::DuplicateConflict {
                key,
                first: existing.description.clone(),
                second: description,
            }),
            None => {
                self.concepts
                    .insert(key.clone(), Concept { key, description });
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, key: &ConceptKey) -> Option<&Concept> {
        self.concepts.get(key)
    }

    pub fn lookup(&self, ontology_id: &str, code: &str) -> Option<&Concept> {
        self.concepts.get(&ConceptKey::new(ontology_id, code))
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn ontologies(&self) -> BTreeSet<&str> {
        self.concepts
            .keys()
            .map(|k| k.ontology_id.as_str())
            .collect()
    }

    /// The description corpus: every distinct description, sorted.
    pub fn descriptions(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .concepts
            .values()
            .map(|c| c.description.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<(), OntologyError> {
        let mut out = Vec::new();
        for c in self.concepts.values() {
            writeln!(
                out,
                "{}\t{}\t{}",
                c.key.ontology_id, c.key.code, c.description
            )
            .expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| io_err(path, e))
    }
}

/// Parses a tab-separated catalog (ontology, code, description; no header).
pub fn parse_catalog(text: &str) -> Result<OntologyCatalog, OntologyError> {
    let mut catalog = OntologyCatalog::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 {
            return Err(OntologyError::MalformedRow {
                line,
                found: cols.len(),
            });
        }
        catalog.insert(
            Concept {
                key: ConceptKey::new(cols[0], cols[1]),
                description: cols[2].to_string(),
            },
            line,
        )?;
    }
    Ok(catalog)
}

pub fn load_catalog(path: &Path) -> Result<OntologyCatalog, OntologyError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_catalog(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCode {
    pub ontology_id: String,
    pub code: String,
    #[serde(default)]
    pub include_descendants: bool,
}

impl MatchCode {
    pub fn new(ontology_id: &str, code: &str, include_descendants: bool) -> Self {
        Self {
            ontology_id: ontology_id.trim().to_string(),
            code: code.trim().to_string(),
            include_descendants,
        }
    }

    pub fn matches(&self, key: &ConceptKey) -> bool {
        if key.ontology_id != self.ontology_id {
            return false;
        }
        if self.include_descendants {
            key.code.starts_with(&self.code)
        } else {
            key.code == self.code
        }
    }
}

/// A curated code list defining one phenotype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeDefinition {
    pub phenotype_id: String,
    pub name: String,
    pub codes: Vec<MatchCode>,
}

impl PhenotypeDefinition {
    /// The phenotype oracle over term-description pairs.
    pub fn indicator(&self, concept: &Concept) -> bool {
        self.codes.iter().any(|m| m.matches(&concept.key))
    }
}

/// Free-function form of [`PhenotypeDefinition::indicator`].
pub fn indicator(defn: &PhenotypeDefinition, concept: &Concept) -> bool {
    defn.indicator(concept)
}

/// A definition code that matches nothing in the catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnresolvedCode {
    pub phenotype_id: String,
    pub code: MatchCode,
}

#[derive(Debug, Clone)]
pub struct DefinitionSet {
    pub definitions: Vec<PhenotypeDefinition>,
    pub unresolved: Vec<UnresolvedCode>,
}

impl DefinitionSet {
    pub fn ids(&self) -> Vec<&str> {
        self.definitions
            .iter()
            .map(|d| d.phenotype_id.as_str())
            .collect()
    }
}

/// Parses a JSON array of definitions, keeping file order.
pub fn parse_phenotype_definitions(
    text: &str,
    catalog: &OntologyCatalog,
) -> Result<DefinitionSet, OntologyError> {
    if text.trim().is_empty() {
        return Err(OntologyError::EmptyDefinitionSet);
    }
    let raw: Vec<PhenotypeDefinition> = serde_json::from_str(text)
        .map_err(|e| OntologyError::MalformedDefinition(e.to_string()))?;
    if raw.is_empty() {
        return Err(OntologyError::EmptyDefinitionSet);
    }
    let mut seen = HashSet::new();
    let mut definitions = Vec::with_capacity(raw.len());
    let mut unresolved = Vec::new();
    for defn in raw {
        let phenotype_id = defn.phenotype_id.trim().to_string();
        if phenotype_id.is_empty() {
            return Err(OntologyError::MalformedDefinition(
                "empty phenotype_id".into(),
            ));
        }
        if !seen.insert(phenotype_id.clone()) {
            return Err(OntologyError::MalformedDefinition(format!(
                "duplicate phenotype_id {phenotype_id}"
            )));
        }
        let codes: Vec<MatchCode> = defn
            .codes
            .iter()
            .map(|m| MatchCode::new(&m.ontology_id, &m.code, m.include_descendants))
            .collect();
        for code in &codes {
            if code.code.is_empty() || code.ontology_id.is_empty() {
                return Err(OntologyError::MalformedDefinition(format!(
                    "{phenotype_id}: empty code or ontology_id"
                )));
            }
            if !catalog.concepts().any(|c| code.matches(&c.key)) {
                log::warn!(
                    "phenotype {phenotype_id}: code {}:{} matches no catalog concept",
                    code.ontology_id,
                    code.code
                );
                unresolved.push(UnresolvedCode {
                    phenotype_id: phenotype_id.clone(),
                    code: code.clone(),
                });
            }
        }
        definitions.push(PhenotypeDefinition {
            phenotype_id,
            name: defn.name,
            codes,
        });
    }
    Ok(DefinitionSet {
        definitions,
        unresolved,
    })
}

pub fn load_phenotype_definitions(
    path: &Path,
    catalog: &OntologyCatalog,
) -> Result<DefinitionSet, OntologyError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_phenotype_definitions(&text, catalog)
}

pub fn write_phenotype_definitions(
    path: &Path,
    defs: &[PhenotypeDefinition],
) -> Result<(), OntologyError> {
    let text = serde_json::to_string_pretty(defs).expect("definitions serialize");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn concept(o: &str, c: &str, d: &str) -> Concept {
        Concept {
            key: ConceptKey::new(o, c),
            description: d.to_string(),
        }
    }

    #[test]
    fn single_row_load() {
        let cat =
            parse_catalog("ICD10\tE11.9\tType 2 diabetes mellitus without complications\n")
                .unwrap();
        assert_eq!(cat.len(), 1);
        assert_eq!(
            cat.lookup("ICD10", "E11.9").unwrap().description,
            "Type 2 diabetes mellitus without complications"
        );
    }

    #[test]
    fn identical_rows_dedup() {
        let cat = parse_catalog("ICD10\tE11.9\tdesc\nICD10\tE11.9\tdesc\n").unwrap();
        assert_eq!(cat.len(), 1);
    }

    #[test]
    fn conflicting_rows_rejected() {
        let err = parse_catalog("ICD10\tE11.9\tdesc A\nICD10\tE11.9\tdesc B\n").unwrap_err();
        assert!(matches!(err, OntologyError::DuplicateConflict { .. }));
    }

    #[test]
    fn malformed_and_empty_rows() {
        assert!(matches!(
            parse_catalog("ICD10\tE11.9\n").unwrap_err(),
            OntologyError::MalformedRow { line: 1, found: 2 }
        ));
        assert!(matches!(
            parse_catalog("ICD10\tE11.9\tx\nICD10\tE12\t   \n").unwrap_err(),
            OntologyError::EmptyDescription { line: 2 }
        ));
    }

    fn toy_catalog() -> OntologyCatalog {
        parse_catalog(
            "ICD10\tE11\tType 2 diabetes mellitus\n\
             ICD10\tE11.9\tType 2 diabetes mellitus without complications\n\
             ICD10\tI50.0\tCongestive heart failure\n\
             READ2\tC10F.\tType 2 diabetes mellitus\n\
             READ2\tC10F1\tType 2 diabetes mellitus with renal complications\n",
        )
        .unwrap()
    }

    #[test]
    fn definitions_keep_order_and_flag_unresolved() {
        let json = r#"[
            {"phenotype_id":"T2DM","name":"Type 2 diabetes","codes":[{"ontology_id":"ICD10","code":"E11","include_descendants":true}]},
            {"phenotype_id":"HF","name":"Heart failure","codes":[{"ontology_id":"ICD10","code":"I50","include_descendants":true}]},
            {"phenotype_id":"BC","name":"Breast cancer","codes":[{"ontology_id":"ICD10","code":"C50","include_descendants":true}]},
            {"phenotype_id":"PC","name":"Prostate cancer","codes":[{"ontology_id":"ICD10","code":"C61","include_descendants":false},{"ontology_id":"READ2","code":"C10F.","include_descendants":false}]}
        ]"#;
        let set = parse_phenotype_definitions(json, &toy_catalog()).unwrap();
        assert_eq!(set.ids(), vec!["T2DM", "HF", "BC", "PC"]);
        assert_eq!(set.unresolved.len(), 2);
        assert_eq!(set.unresolved[0].code.code, "C50");
        assert_eq!(set.unresolved[1].code.code, "C61");
    }

    #[test]
    fn empty_definitions_rejected() {
        let cat = toy_catalog();
        assert!(matches!(
            parse_phenotype_definitions("", &cat).unwrap_err(),
            OntologyError::EmptyDefinitionSet
        ));
        assert!(matches!(
            parse_phenotype_definitions("[]", &cat).unwrap_err(),
            OntologyError::EmptyDefinitionSet
        ));
        assert!(matches!(
            parse_phenotype_definitions("{", &cat).unwrap_err(),
            OntologyError::MalformedDefinition(_)
        ));
    }

    #[test]
    fn indicator_with_descendants() {
        let defn = PhenotypeDefinition {
            phenotype_id: "T2DM".into(),
            name: "T2DM".into(),
            codes: vec![MatchCode::new("ICD10", "E11", true)],
        };
        assert!(defn.indicator(&concept("ICD10", "E11.9", "x")));
        assert!(!defn.indicator(&concept("ICD10", "I50.0", "x")));
        assert!(!defn.indicator(&concept("READ2", "E11.9", "x")));
    }

    #[test]
    fn exact_match_semantics_over_toy_hierarchy() {
        let defn = PhenotypeDefinition {
            phenotype_id: "T2DM".into(),
            name: "T2DM".into(),
            codes: vec![MatchCode::new("READ2", "C10F.", false)],
        };
        let codes = [
            "C10..", "C10E.", "C10F.", "C10F0", "C10F1", "C10F7", "C10FJ", "C108.", "C1...",
            "C10F",
        ];
        for code in codes {
            let expected = code == "C10F.";
            assert_eq!(
                defn.indicator(&concept("READ2", code, "d")),
                expected,
                "code {code}"
            );
        }
    }

    proptest! {
        #[test]
        fn descendant_matching_is_monotone(prefix in "[A-Z][0-9]{1,2}", suffix in "[0-9.A-Z]{0,3}") {
            let m = MatchCode::new("ICD10", &prefix, true);
            let child = ConceptKey::new("ICD10", format!("{prefix}{suffix}"));
            prop_assert!(m.matches(&child));
            let exact = MatchCode::new("ICD10", &prefix, false);
            prop_assert_eq!(exact.matches(&child), suffix.is_empty());
        }

        #[test]
        fn catalog_load_is_order_independent(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let rows = vec![
                "ICD10\tE11\tA", "ICD10\tE11.9\tB", "READ2\tC10F.\tC", "READ2\tC10F1\tD", "ICD10\tI50\tE",
            ];
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut crate::stream_rng!(seed));
            let a = parse_catalog(&rows.join("\n")).unwrap();
            let b = parse_catalog(&shuffled.join("\n")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
