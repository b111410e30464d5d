use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic {
        expected: &'static str,
        found: [u8; 4],
    },

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("insufficient samples: need more than {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate mixture component {0}")]
    DegenerateComponent(usize),

    #[error("missing model blob {0}")]
    MissingBlob(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("unsupported model format version {0:?}")]
    VersionMismatch(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ground truth: {0}")]
    GroundTruth(String),

    #[error("malformed input: {0}")]
    Malformed(String),
}

impl Error {
    /// Configuration problems map to CLI exit code 2, everything else to 3.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
