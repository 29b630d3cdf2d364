//! Error taxonomy shared by every module.

use std::fmt;
use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A caller violated an operation precondition (bad shape, bad enum, bad range).
    InvalidArgument(String),
    /// A configuration file or config combination is unusable.
    InvalidConfig(String),
    /// Filesystem failure; always names the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// Stored data failed a checksum or format check.
    CorruptData(String),
    /// A loss term or gradient became NaN during training. Names the term and
    /// the last good checkpoint when one exists.
    PoisonedLoss {
        term: String,
        last_checkpoint: Option<PathBuf>,
    },
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptData(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::CorruptData(msg) => write!(f, "corrupt data: {msg}"),
            Error::PoisonedLoss {
                term,
                last_checkpoint,
            } => match last_checkpoint {
                Some(p) => write!(
                    f,
                    "poisoned loss: term `{term}` is not finite (last good checkpoint: {})",
                    p.display()
                ),
                None => write!(
                    f,
                    "poisoned loss: term `{term}` is not finite (no checkpoint written yet)"
                ),
            },
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
