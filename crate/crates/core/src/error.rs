use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: String },

    #[error("{path}: format error at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
