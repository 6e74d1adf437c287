use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    Dimension { op: &'static str, reason: String },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("empty loss: mask selects no positions")]
    EmptyLoss,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("sequence of length {len} exceeds the limit of {max} for {what}")]
    Length { what: &'static str, len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("forward is not deterministic: {0}")]
    Determinism(String),

    #[error("pretraining failed: {0}")]
    PretrainFailure(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("batch is empty after filtering")]
    EmptyBatch,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numbers themselves rather than
    /// from usage or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::PretrainFailure(_) | Error::Determinism(_)
        )
    }
}
