use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error at row {row}: {message}")]
    Integrity { row: usize, message: String },

    #[error("degenerate feature `{0}`: max equals min on the training segment")]
    DegenerateFeature(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("stale forward trace: parameters changed since the forward pass")]
    StaleTrace,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient tail: {found} exceedances, need at least {required}")]
    InsufficientTail { found: usize, required: usize },

    #[error("fit did not converge: {0}")]
    Fit(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("divergence: non-finite gradient in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("strategy unavailable: {0}")]
    StrategyUnavailable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("checkpoint error ({path}): {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checksum mismatch for {path}: expected {expected:08x}, found {found:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::StrategyUnavailable(_) => ErrorClass::Config,
            Error::Numeric(_)
            | Error::Divergence { .. }
            | Error::Fit(_)
            | Error::Domain(_)
            | Error::StaleTrace => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
