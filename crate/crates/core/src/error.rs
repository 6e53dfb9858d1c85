use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("linear system is numerically singular (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("prototype for class {0} is undefined")]
    UndefinedPrototype(usize),

    #[error("zero-norm vector in cosine similarity ({0})")]
    ZeroNorm(String),

    #[error("no class has a defined prototype in both domains")]
    NoCommonClass,

    #[error("minority class {0} has no source rows")]
    EmptyMinorityClass(usize),

    #[error("target labels are required for evaluation")]
    MissingLabels,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
