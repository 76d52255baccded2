use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding an IDX file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("{path}: wrong magic number 0x{found:08x} (expected 0x{expected:08x})")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Aggregate precision fell below the floor in the listed coordinates.
    #[error("degenerate precision in {} coordinate(s), first: {:?}", indices.len(), &indices[..indices.len().min(8)])]
    DegeneratePrecision { indices: Vec<usize> },

    #[error("responsibility undefined: both component densities vanish")]
    UndefinedResponsibility,

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("dimension {dim} exceeds the dense cap of {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("client {client} diverged in round {round} at step {step}")]
    DivergedClient {
        client: usize,
        round: usize,
        step: usize,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
