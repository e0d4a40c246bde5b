//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("vocabulary mismatch: {0}")]
    Vocab(String),

    #[error("weights must be nonnegative and sum to 1, got sum {sum}")]
    WeightSimplex { sum: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn genotype(msg: impl Into<String>) -> Self {
        Error::Genotype(msg.into())
    }
}
