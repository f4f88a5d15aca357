use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A malformed line in an input file.
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    /// Input that parsed but breaks a data invariant.
    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }
}

/// Failures talking to a scorer, in-process or over the wire.
#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer transport: {0}")]
    Transport(#[from] io::Error),
    #[error("scorer protocol: {0}")]
    Protocol(String),
    #[error("scorer handshake: {0}")]
    Handshake(String),
    #[error("scorer timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("scorer rejected request {id}: {message}")]
    Rejected { id: String, message: String },
}
