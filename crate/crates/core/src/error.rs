//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Inconsistent or unusable input data (bad dates, missing labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary container or sidecar failed to parse.
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    /// Bad pipeline configuration (dimension mismatches, unknown keys, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A window/night was rejected by a documented gate; callers usually
    /// count these and move on rather than aborting.
    #[error("rejected: {0}")]
    Rejected(String),

    /// Training produced a non-finite loss; carries the abort diagnostics.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (param norm {param_norm:.3e}, grad norm {grad_norm:.3e})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norm: f64,
        grad_norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::Rejected(msg.into())
    }

    /// True for the skip-and-count rejections (quality gate, sparse beats, ...).
    pub fn is_rejection(&self) -> bool {
        matches!(self, Error::Rejected(_))
    }
}
