use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, K > N, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared while evaluating `op`.
    #[error("numeric failure in `{op}`")]
    Numeric { op: &'static str },

    /// A point or tangent vector lies outside the region where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
