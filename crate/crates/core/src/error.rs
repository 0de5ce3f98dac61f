use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("missing forward cache: {0}")]
    MissingCache(String),

    #[error("bad magic bytes in weight file")]
    BadMagic,

    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("truncated weight file: {0}")]
    Truncated(String),

    #[error("weights do not match config: {0}")]
    WeightShape(String),

    #[error("no samples for class `{0}`")]
    EmptyClass(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("malformed input file: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::MissingCache(_) => "missing_cache",
            Error::BadMagic => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::WeightShape(_) => "weight_shape",
            Error::EmptyClass(_) => "empty_class",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Pgm(_) => "pgm",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}
