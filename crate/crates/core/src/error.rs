use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the restoration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, range or configuration precondition was violated.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An operation produced (or was handed) a NaN or infinity.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// The tape or a variable handle is not in a usable state.
    #[error("invalid state: {0}")]
    State(String),

    /// A file did not follow its binary or text layout.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A checkpoint was written for a different architecture.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
