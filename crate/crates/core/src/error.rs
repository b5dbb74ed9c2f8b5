use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("key sets differ: `{0}` is present in only one checkpoint")]
    KeyMismatch(String),

    #[error("shape mismatch for `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad checkpoint format: {0}")]
    Format(String),

    #[error("merge requires at least one candidate")]
    EmptyInput,

    #[error("weight vector has {got} entries for {expected} candidates")]
    WeightMismatch { expected: usize, got: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("task vector `{0}` has (near) zero norm")]
    ZeroTaskVector(&'static str),

    #[error("probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("invalid breadcrumbs thresholds beta={beta}, gamma={gamma}")]
    InvalidThresholds { beta: f64, gamma: f64 },

    #[error("{technique} merges exactly 2 candidates, got {got}")]
    Arity { technique: &'static str, got: usize },

    #[error("count must be at least 1, got {0}")]
    InvalidCount(usize),

    #[error("invalid merge config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint buffer is empty")]
    EmptyBuffer,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bench has no holdout tasks")]
    EmptyHoldout,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for the key/shape disagreements that merge entry points report.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            Error::KeyMismatch(_) | Error::ShapeMismatch { .. } | Error::StructureMismatch(_)
        )
    }
}
