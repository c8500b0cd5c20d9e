//! Crate-wide error type.
//!
//! Variants are grouped by how callers should react: [`Error::Config`] and
//! friends are caller mistakes (bad file, bad shape, bad option) while
//! [`Error::NonFinite`] signals a numeric failure discovered at runtime.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid file format for {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an i/o error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
