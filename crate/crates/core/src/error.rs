//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// The gradient does not exist at the evaluation point.
    #[error("singular gradient: {0}")]
    SingularGradient(String),

    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A matrix violates the row-stochastic constraints.
    #[error("constraint violated: {0}")]
    Constraint(String),

    /// An argument lies outside the domain where a quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range (limit {limit}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint mismatch at parameter `{name}`: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::FileIo {
            path: path.into(),
            source,
        }
    }
}
