//! Error type shared across the crate.

use thiserror::Error;

/// Errors reported by solver, generator, and harness operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A scalar or structural argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix or vector entry is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Least-squares refit hit a numerically rank-deficient system.
    #[error("rank-deficient least-squares system (pivot {pivot:.3e})")]
    RankDeficient { pivot: f64 },

    /// A matrix column is identically zero where a nonzero one is required.
    #[error("zero column {0} encountered")]
    ZeroColumn(usize),

    /// Configuration file failed validation; the message names the field.
    #[error("config error: {0}")]
    Config(String),

    /// Instance file is malformed or inconsistent with its metadata.
    #[error("instance format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
