use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed manifest record: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("feature file not found: {0}")]
    MissingFeatureFile(PathBuf),

    #[error("bad feature matrix file {path}: {msg}")]
    FeatureFormat { path: PathBuf, msg: String },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("invalid sample {id:?}: {msg}")]
    InvalidSample { id: String, msg: String },

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("invalid mixture: {0}")]
    Mixture(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero vector for id {0:?}")]
    ZeroVector(String),

    #[error("k={k} exceeds the effective pool size {available}")]
    PoolTooSmall { k: usize, available: usize },

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("sequence of {len} tokens exceeds budget {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite {what} at layer {layer}")]
    NonFinite { what: &'static str, layer: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Numeric failures map to a distinct CLI exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }
}
