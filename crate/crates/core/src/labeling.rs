//! Oracle labeling of fused histories.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ontology::PhenotypeDefinition;
use crate::records::FusedEntry;

/// A description sequence with the phenotypes each entry triggers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedHistory {
    pub entries: Vec<FusedEntry>,
    /// Per entry: indices into the definition list, ascending.
    pub tags: Vec<Vec<usize>>,
    /// Multi-label target in definition order.
    pub y: Vec<u8>,
}

impl TaggedHistory {
    pub fn num_phenotypes(&self) -> usize {
        self.y.len()
    }

    pub fn is_tagged(&self, entry: usize, phenotype: usize) -> bool {
        self.tags[entry].contains(&phenotype)
    }

    /// Positions of entries tagged with `phenotype`.
    pub fn positions(&self, phenotype: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.is_tagged(i, phenotype))
            .collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.y.len()).filter(|&d| self.y[d] == 1).collect()
    }
}

/// Tags each entry with every matching phenotype and OR-aggregates the
/// tags into the target vector.
pub fn tag_history(sequence: &[FusedEntry], defs: &[PhenotypeDefinition]) -> TaggedHistory {
    let mut y = vec![0u8; defs.len()];
    let tags: Vec<Vec<usize>> = sequence
        .iter()
        .map(|entry| {
            defs.iter()
                .enumerate()
                .filter(|(_, defn)| defn.indicator(&entry.concept))
                .map(|(d, _)| d)
                .collect()
        })
        .collect();
    for t in &tags {
        for &d in t {
            y[d] = 1;
        }
    }
    TaggedHistory {
        entries: sequence.to_vec(),
        tags,
        y,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    pub patient_ids: Vec<String>,
    pub phenotype_ids: Vec<String>,
    pub rows: Vec<Vec<u8>>,
    /// Per patient, per phenotype: positions of the tagged entries.
    pub tag_index: Vec<Vec<Vec<usize>>>,
}

impl LabelMatrix {
    pub fn num_patients(&self) -> usize {
        self.rows.len()
    }

    pub fn num_phenotypes(&self) -> usize {
        self.phenotype_ids.len()
    }

    pub fn column(&self, d: usize) -> impl Iterator<Item = u8> + '_ {
        self.rows.iter().map(move |r| r[d])
    }

    pub fn case_counts(&self) -> Vec<usize> {
        (0..self.num_phenotypes())
            .map(|d| self.column(d).filter(|&v| v == 1).count())
            .collect()
    }

    /// Phenotypes without a single case; they stay in the matrix as zero columns.
    pub fn zero_case_phenotypes(&self) -> Vec<&str> {
        self.case_counts()
            .iter()
            .zip(&self.phenotype_ids)
            .filter(|(&c, _)| c == 0)
            .map(|(_, id)| id.as_str())
            .collect()
    }

    /// Sub-matrix of the given row indices (in that order).
    pub fn select(&self, rows: &[usize]) -> LabelMatrix {
        LabelMatrix {
            patient_ids: rows.iter().map(|&r| self.patient_ids[r].clone()).collect(),
            phenotype_ids: self.phenotype_ids.clone(),
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
            tag_index: rows.iter().map(|&r| self.tag_index[r].clone()).collect(),
        }
    }

    pub fn write_tsv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = Vec::new();
        write!(out, "patient_id")?;
        for id in &self.phenotype_ids {
            write!(out, "\t{id}")?;
        }
        writeln!(out)?;
        for (pid, row) in self.patient_ids.iter().zip(&self.rows) {
            write!(out, "{pid}")?;
            for v in row {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
        }
        std::fs::write(path, out)
    }
}

/// Stacks tagged histories (in the given order) into an N x D matrix.
pub fn build_label_matrix<'a>(
    histories: impl IntoIterator<Item = (&'a str, &'a TaggedHistory)>,
    defs: &[PhenotypeDefinition],
) -> LabelMatrix {
    let mut m = LabelMatrix {
        patient_ids: Vec::new(),
        phenotype_ids: defs.iter().map(|d| d.phenotype_id.clone()).collect(),
        rows: Vec::new(),
        tag_index: Vec::new(),
    };
    for (pid, tagged) in histories {
        m.patient_ids.push(pid.to_string());
        m.rows.push(tagged.y.clone());
        m.tag_index
            .push((0..defs.len()).map(|d| tagged.positions(d)).collect());
    }
    for id in m.zero_case_phenotypes() {
        log::warn!("phenotype {id} has no cases in this cohort");
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{Concept, ConceptKey, MatchCode};
    use crate::records::Source;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn defs() -> Vec<PhenotypeDefinition> {
        vec![
            PhenotypeDefinition {
                phenotype_id: "T2DM".into(),
                name: "Type 2 diabetes".into(),
                codes: vec![
                    MatchCode::new("ICD10", "E11", true),
                    MatchCode::new("READ2", "C10F.", false),
                ],
            },
            PhenotypeDefinition {
                phenotype_id: "HF".into(),
                name: "Heart failure".into(),
                codes: vec![MatchCode::new("ICD10", "I50", true)],
            },
        ]
    }

    fn entry(o: &str, c: &str) -> FusedEntry {
        FusedEntry {
            concept: Concept {
                key: ConceptKey::new(o, c),
                description: format!("desc {c}"),
            },
            date: NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
            source: Source::Gp,
        }
    }

    const POOL: [(&str, &str); 8] = [
        ("ICD10", "E11.9"),
        ("ICD10", "E11"),
        ("ICD10", "I50.0"),
        ("ICD10", "J45"),
        ("READ2", "C10F."),
        ("READ2", "C10F1"),
        ("READ2", "246.."),
        ("ICD10", "I10"),
    ];

    #[test]
    fn single_match() {
        let seq = vec![entry("ICD10", "J45"), entry("ICD10", "E11.9")];
        let t = tag_history(&seq, &defs());
        assert_eq!(t.y, vec![1, 0]);
        assert_eq!(t.tags, vec![vec![], vec![0]]);
    }

    #[test]
    fn no_match() {
        let seq = vec![entry("ICD10", "J45"), entry("READ2", "C10F1")];
        let t = tag_history(&seq, &defs());
        assert_eq!(t.y, vec![0, 0]);
        assert!(t.tags.iter().all(Vec::is_empty));
    }

    #[test]
    fn tags_match_brute_force_indicator() {
        let defs = defs();
        let seq: Vec<FusedEntry> = (0..20)
            .map(|i| {
                let (o, c) = POOL[(i * 7 + 3) % POOL.len()];
                entry(o, c)
            })
            .collect();
        let t = tag_history(&seq, &defs);
        let mut expected_y = vec![0u8; defs.len()];
        for (i, e) in seq.iter().enumerate() {
            for (d, defn) in defs.iter().enumerate() {
                let hit = defn.indicator(&e.concept);
                assert_eq!(t.is_tagged(i, d), hit);
                if hit {
                    expected_y[d] = 1;
                }
            }
        }
        assert_eq!(t.y, expected_y);
        assert_eq!(t.y, vec![1, 1]);
    }

    #[test]
    fn label_matrix_shape_and_counts() {
        let defs = vec![
            defs()[0].clone(),
            defs()[1].clone(),
            PhenotypeDefinition {
                phenotype_id: "A".into(),
                name: "A".into(),
                codes: vec![MatchCode::new("ICD10", "J45", false)],
            },
            PhenotypeDefinition {
                phenotype_id: "B".into(),
                name: "B".into(),
                codes: vec![MatchCode::new("ICD10", "Z99", false)],
            },
        ];
        let hs: Vec<(String, TaggedHistory)> = vec![
            ("p1".into(), tag_history(&[entry("ICD10", "E11.9")], &defs)),
            ("p2".into(), tag_history(&[entry("ICD10", "I50.0"), entry("ICD10", "J45")], &defs)),
            ("p3".into(), tag_history(&[entry("READ2", "C10F."), entry("ICD10", "J45")], &defs)),
        ];
        let m = build_label_matrix(hs.iter().map(|(p, t)| (p.as_str(), t)), &defs);
        assert_eq!(m.rows.len(), 3);
        assert!(m.rows.iter().all(|r| r.len() == 4));
        // independent column count over the tagged histories
        let independent: Vec<usize> = (0..4)
            .map(|d| hs.iter().filter(|(_, t)| t.tags.iter().any(|s| s.contains(&d))).count())
            .collect();
        assert_eq!(m.case_counts(), independent);
        assert_eq!(m.zero_case_phenotypes(), vec!["B"]);

        let rev = build_label_matrix(hs.iter().rev().map(|(p, t)| (p.as_str(), t)), &defs);
        let mut rows = m.rows.clone();
        rows.reverse();
        assert_eq!(rev.rows, rows);
    }

    proptest! {
        #[test]
        fn removing_tagged_entries_flips_only_that_label(picks in proptest::collection::vec(0usize..POOL.len(), 0..20), d in 0usize..2) {
            let defs = defs();
            let seq: Vec<FusedEntry> = picks.iter().map(|&i| entry(POOL[i].0, POOL[i].1)).collect();
            let t = tag_history(&seq, &defs);
            // entries tagged with d and nothing else
            let only_d = |i: usize| t.tags[i] == vec![d];
            let any_mixed = (0..seq.len()).any(|i| t.is_tagged(i, d) && t.tags[i].len() > 1);
            prop_assume!(!any_mixed);
            let kept: Vec<FusedEntry> = (0..seq.len()).filter(|&i| !only_d(i)).map(|i| seq[i].clone()).collect();
            let t2 = tag_history(&kept, &defs);
            prop_assert_eq!(t2.y[d], 0);
            for k in 0..defs.len() {
                if k != d {
                    prop_assert_eq!(t2.y[k], t.y[k]);
                }
            }
            prop_assert_eq!(tag_history(&seq, &defs), t);
        }
    }
}
