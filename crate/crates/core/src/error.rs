use std::path::PathBuf;

use fmclass_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("png: {0}")]
    Png(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest references missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Self::Format { offset, msg: msg.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    /// True for errors caused by bad user input rather than I/O failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Self::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
