use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("duplicate user_id {0:?}")]
    DuplicateUser(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot stratify: label {label} has only {count} users (need at least 3)")]
    Stratification { label: String, count: usize },

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },

    #[error("model is not differentiable with respect to its input embeddings: {0}")]
    NotDifferentiable(String),

    #[error("vocabulary hash mismatch: checkpoint has {expected}, tokenizer has {actual}")]
    VocabularyMismatch { expected: String, actual: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
