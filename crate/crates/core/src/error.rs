use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the enhancement toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("missing style donor `{0}` in donor pool")]
    MissingDonor(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 1 usage/config, 2 data, 3 runtime-numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schedule(_) | Error::Checkpoint(_) => 1,
            Error::NonFinite(_) => 3,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Degenerate(_)
            | Error::Shape(_)
            | Error::Size(_)
            | Error::Range(_)
            | Error::MissingDonor(_)
            | Error::Consistency(_)
            | Error::Manifest(_) => 2,
        }
    }
}
