use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pgm: {0}")]
    Pgm(#[from] PgmError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("config: {0}")]
    Config(String),

    #[error("split plan: {0}")]
    Plan(String),

    #[error("evaluation data leaked into training: {0}")]
    Leakage(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configuration, usage, unit
    /// selection) rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Plan(_) | Error::InvalidArgument(_)
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("bad magic {0:?}, expected \"P5\"")]
    BadMagic(String),
    #[error("unsupported maxval {0}, expected 255")]
    BadMaxval(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic, not an SFCK checkpoint")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file too short ({0} bytes)")]
    Truncated(usize),
    #[error("malformed body: {0}")]
    Malformed(String),
}
