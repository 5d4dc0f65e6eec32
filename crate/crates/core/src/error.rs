use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("line {line}: offense {value} outside [0, 5]")]
    OffenseRange { line: usize, value: f64 },

    #[error("duplicate example id {0}")]
    DuplicateId(u64),

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("subset construction failed: cell `{0}` is empty")]
    EmptyCell(String),

    #[error("few-shot size {0} must be even")]
    OddShots(usize),

    #[error("few-shot sample needs {needed} examples of class {class}, only {available} available")]
    Capacity {
        class: u8,
        needed: usize,
        available: usize,
    },

    #[error("verbalizer head requires a sequence with a mask slot")]
    HeadMismatch,

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("damped Hessian not positive definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    Conditioning { min_eigenvalue: f64 },

    #[error("trainable dimension {0} too large for a dense solve (limit 5000)")]
    DenseLimit(usize),

    #[error("LiSSA recursion diverged at step {step} (|h| = {norm:.3e}); increase the scale")]
    Divergence { step: usize, norm: f64 },

    #[error("k = {k} exceeds the {available} available training examples")]
    Bound { k: usize, available: usize },

    #[error("unknown training example id {0}")]
    UnknownId(u64),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
