//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the toolkit, grouped so that callers can
/// map failures onto exit-code categories (usage / data / numerical).
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or arguments (bad hyperparameters, empty corpus,
    /// out-of-range cluster counts, ...).
    Config(String),
    /// Malformed or inconsistent input data (datasets, label maps, records).
    Data(String),
    /// I/O failure with the offending path.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A numeric computation produced a non-finite value.
    Numerical(String),
    /// A token id outside the vocabulary.
    InvalidToken { id: u32, vocab_size: usize },
    /// Input longer than the model's positional table.
    InputTooLong { len: usize, max: usize },
    /// Tensor/shape mismatch in a forward or gradient pass.
    Shape {
        what: String,
        expected: String,
        found: String,
    },
    /// Checkpoint file does not start with the expected magic bytes.
    CheckpointMagic { found: [u8; 4] },
    /// Checkpoint version not understood by this build.
    CheckpointVersion { found: u32, expected: u32 },
    /// Checkpoint ended mid-record.
    CheckpointTruncated,
    /// A stored tensor does not have the shape implied by the header config.
    CheckpointShape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A metric was requested over an empty result set.
    UndefinedMetric(&'static str),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Usage,
            Error::Numerical(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io { path, source } => write!(f, "io error: {path}: {source}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::InvalidToken { id, vocab_size } => {
                write!(f, "invalid token id {id} (vocab size {vocab_size})")
            }
            Error::InputTooLong { len, max } => {
                write!(f, "input of {len} positions exceeds maximum of {max}")
            }
            Error::Shape {
                what,
                expected,
                found,
            } => {
                write!(
                    f,
                    "shape error in {what}: expected {expected}, found {found}"
                )
            }
            Error::CheckpointMagic { found } => {
                write!(f, "checkpoint magic mismatch: found {found:?}")
            }
            Error::CheckpointVersion { found, expected } => {
                write!(
                    f,
                    "checkpoint version {found} not supported (expected {expected})"
                )
            }
            Error::CheckpointTruncated => write!(f, "checkpoint truncated"),
            Error::CheckpointShape {
                tensor,
                expected,
                found,
            } => {
                write!(
                    f,
                    "checkpoint tensor `{tensor}`: expected shape {expected:?}, found {found:?}"
                )
            }
            Error::UndefinedMetric(which) => {
                write!(f, "{which} undefined over an empty result set")
            }
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
