use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain of a grid, distribution or policy operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The caller broke an operation's precondition (double-assigned order,
    /// dead order reference, empty next-action set, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
