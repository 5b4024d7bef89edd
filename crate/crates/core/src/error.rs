use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a shape or argument contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid spline grid: {0}")]
    InvalidGrid(String),

    /// A forward or backward pass produced NaN/Inf; `site` names the layer or parameter.
    #[error("non-finite value in {site}")]
    NonFinite { site: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    DataAt {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// An operation precondition that depends on runtime data (e.g. prefix length) failed.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn non_finite(site: impl Into<String>) -> Self {
        Error::NonFinite { site: site.into() }
    }
}

/// Fails with [`Error::NonFinite`] naming `site` if any value is NaN or infinite.
pub(crate) fn ensure_finite(values: &[f64], site: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(site))
    }
}
