//! Crate-wide error type.

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

    /// Image exists but is not an 8-bit RGB PNG.
    #[error("unsupported image {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Dataset directory tree does not match the expected layout.
    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Checkpoint archive is corrupt or does not match the architecture.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss component.
    #[error("non-finite loss at step {step}: component `{component}` is not finite")]
    NonFinite { step: usize, component: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
