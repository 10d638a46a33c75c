use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("task index {index} out of range for {count} task(s)")]
    TaskOutOfRange { index: usize, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("no positive support: no pair of items shares a label")]
    NoPositiveSupport,

    #[error("no negative support: all items share one label")]
    NoNegativeSupport,

    #[error("empty constraint set")]
    EmptyPairSet,

    #[error("training diverged at iteration {iteration} (non-finite parameters); lower eta")]
    Diverged { iteration: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: header requires {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing bytes: header accounts for {expected} bytes, file has {actual}")]
    TrailingBytes { expected: u64, actual: u64 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
}

impl Error {
    /// Stable, machine-parsable class name for the error.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::TaskOutOfRange { .. } => "task_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::NoPositiveSupport => "no_positive_support",
            Error::NoNegativeSupport => "no_negative_support",
            Error::EmptyPairSet => "empty_pair_set",
            Error::Diverged { .. } => "diverged",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated { .. } => "truncated_payload",
            Error::TrailingBytes { .. } => "trailing_bytes",
            Error::Malformed(_) => "malformed",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Eigen(_) => "eigen",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
