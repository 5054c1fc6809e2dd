use thiserror::Error;

use crate::augmentation::AugmentError;
use crate::encoder::ModelError;
use crate::evaluation::EvalError;
use crate::ontology::OntologyError;
use crate::records::RecordsError;
use crate::synthgen::SynthError;
use crate::tokenizer::TokenizerError;
use crate::training::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Any failure raised while running the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Records(#[from] RecordsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
