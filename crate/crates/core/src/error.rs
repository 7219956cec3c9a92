use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ids or hyper-parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Well-formed input whose content violates a contract (degenerate box,
    /// occluded scene in a training split, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Rejection sampling or placement in the synthesizer gave up.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
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

    /// Usage and configuration problems are the caller's fault; everything
    /// else is a data or I/O failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}
