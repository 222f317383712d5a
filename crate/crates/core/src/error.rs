//! Crate-wide error type.
//!
//! Variants are grouped by *who is at fault*: [`Error::Config`] for bad
//! parameters, [`Error::Parse`]/[`Error::Data`] for problems with the input
//! data, [`Error::Numeric`] for runs that left the representable range, and
//! [`Error::Verification`] for a mathematical property that failed its
//! numerical check.  The CLI maps these groups onto distinct exit codes.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates its documented range or two options conflict.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input line could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The data is structurally unusable (empty, inconsistent ids, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced a non-finite value or diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A verified inequality or identity does not hold at the required tolerance.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for a [`Error::Config`] with a formatted message.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for a [`Error::Data`] with a formatted message.
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Shorthand for a [`Error::Numeric`] with a formatted message.
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
