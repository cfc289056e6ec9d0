use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Malformed input file or record.
    #[error("format error: {0}")]
    Format(String),

    /// Caller passed an argument outside the operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Quantity is undefined for the given input (e.g. a ratio over an empty set).
    #[error("undefined: {0}")]
    Domain(String),

    /// NaN or infinity appeared where a finite value is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("index holds only {available} distinct non-gold entities, {requested} negatives requested")]
    InsufficientNegatives { available: usize, requested: usize },
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
