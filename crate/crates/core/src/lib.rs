//! Phenotyping over heterogeneous EHR terminologies by way of concept text.
//!
//! Clinical events coded in different terminologies are replaced by their
//! text descriptions and fused into one time-ordered paragraph per patient.
//! Phenotype oracles tag the paragraph and yield multi-label targets; a small
//! transformer encoder is trained on clinically masked copies of the
//! paragraph with a comorbidity-aware weighted BCE loss, and its predictions
//! on undiagnosed patients drive cohort expansion.
//!
//! The pipeline stages live in their own modules:
//!
//! * [`ontology`] loads catalogs and phenotype definitions.
//! * [`records`] ingests events and fuses GP and hospital histories.
//! * [`labeling`] applies the phenotype oracles.
//! * [`tokenizer`] is a WordPiece-style subword tokenizer.
//! * [`augmentation`] implements clinical masking, comorbidity replication and MLM masking.
//! * [`encoder`] is the transformer with hand-written backpropagation.
//! * [`training`] holds losses, the optimizer, folds and the training loops.
//! * [`evaluation`] covers metrics, patient groups, survival and curves.
//! * [`synthgen`] generates synthetic cohorts.
//! * [`pipeline`] wires the stages together over files.

pub mod augmentation;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod labeling;
pub mod ontology;
pub mod pipeline;
pub mod quantile;
pub mod records;
pub mod rng;
pub mod synthgen;
pub mod tokenizer;
pub mod training;

pub use augmentation::{MaskingConfig, MaskingMode, MlmConfig, Sample};
pub use encoder::{Model, ModelConfig, ModelParameters};
pub use error::{Error, Result};
pub use evaluation::{PatientGroups, PredictionSet, SurvivalCurve};
pub use labeling::TaggedHistory;
pub use ontology::{Concept, ConceptKey, OntologyCatalog, PhenotypeDefinition};
pub use records::{ClinicalEvent, CohortMeta, FusedEntry, PatientHistory, Source};
pub use tokenizer::{TokenizedSequence, Vocabulary};
pub use training::{FoldAssignment, PositiveWeights, TrainConfig};
