use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller violated an API contract (shape, mode, length).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error(
        "training diverged at step {step}: loss={loss}, non-finite parameter block {param:?}"
    )]
    TrainingDivergence {
        step: u64,
        loss: f64,
        param: Option<String>,
    },

    #[error("sampling diverged at step {step} (t={t:.6e}): {count} non-finite entries")]
    SamplingDivergence { step: usize, t: f64, count: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
