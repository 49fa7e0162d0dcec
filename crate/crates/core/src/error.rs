//! Error type shared by the whole crate.

use thiserror::Error;

/// Everything that can go wrong in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands (or an operand and a declared geometry) disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A parameter is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// NaN or infinity where finite data is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A verified mathematical property failed to hold numerically.
    #[error("diagnostic check failed: {0}")]
    DiagnosticFailure(String),

    /// Text that should follow a declared grammar does not.
    #[error("parse error: {0}")]
    Parse(String),

    /// A file exists but its contents are not what the format promises.
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub(crate) fn format(path: &std::path::Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
