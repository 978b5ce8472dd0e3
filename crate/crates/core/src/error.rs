//! Error types shared by all modules.

use thiserror::Error;

/// Errors produced by simulation, pricing and solver routines.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An input violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine failed (singular regression, diverging
    /// fixed-point iteration, ...). The message carries the diagnostic.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Reading or writing a panel / report file failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized file did not have the expected layout.
    #[error("format error: {0}")]
    Format(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        CoreError::NumericalFailure(msg.into())
    }
}
