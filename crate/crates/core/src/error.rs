use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value or architecture combination is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an operation's protocol (e.g. fusing an empty score list).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    /// Malformed checkpoint file. `offset` is the byte position where decoding failed.
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    /// Checkpoint is well-formed but does not fit the requested model or data.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("{path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// One or more gradient-check items exceeded the tolerance.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
