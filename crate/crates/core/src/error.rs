//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the operation's domain (bad pixel, bad stride, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs violate a type invariant (non-orthonormal rotation, shape mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad run configuration (unknown augmentation kind, empty camera pool, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset file is missing or malformed.
    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    /// A required external resource (extractor weights, metric backend) is unavailable.
    #[error("initialization error: {0}")]
    Init(String),

    /// A loss term became non-finite during training.
    #[error("non-finite loss in term `{term}` at iteration {iteration}: {detail}")]
    NonFinite {
        term: String,
        iteration: u64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
