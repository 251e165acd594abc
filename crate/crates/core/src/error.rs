//! Error type shared by all modules.

use std::fmt;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor/layer shape disagreement; the message names the offending axes.
    Dimension(String),
    /// Inconsistent or unsupported configuration.
    Config(String),
    /// API misuse (empty inputs, non-scalar loss roots, ...).
    Usage(String),
    /// Numerical failure: NaN/Inf gradients, diverging loss.
    Numeric(String),
    /// Malformed file contents; `offset` is the byte position of the problem.
    Format { offset: u64, message: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
