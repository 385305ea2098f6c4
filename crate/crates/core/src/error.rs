//! Crate-wide error type.
//!
//! Numeric routines reject NaN and dimension mismatches eagerly so that a bad
//! value fails at the call site instead of propagating through a long chain.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("probability must be finite, got {0}")]
    NonFiniteProbability(f64),

    #[error("dim {dim} ({name}): value {value} violates schema: {reason}")]
    SchemaViolation {
        dim: usize,
        name: String,
        value: f64,
        reason: String,
    },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("{field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("monotone map requires strictly increasing knots: {0}")]
    NonMonotoneKnots(String),

    #[error("score stack file: {0}")]
    StackFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for configuration errors, which always carry the offending
    /// field path so CLI users can find the bad entry.
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
