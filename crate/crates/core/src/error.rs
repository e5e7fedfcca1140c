//! One error type for the whole crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes that cannot be combined; the message names the offending
    /// dimensions and sizes.
    Shape(String),
    /// A configuration value outside its legal range.
    Config(String),
    /// Well-formed input on which the requested quantity is undefined
    /// (for example OKS against an instance with no labeled joints).
    Data(String),
    Io(std::io::Error),
    /// Malformed binary tensor file; `offset` is the byte position of the
    /// first inconsistency.
    Format { offset: u64, message: String },
    /// JSON that parses but violates the keypoint/config schema; `path` is
    /// the JSON path of the offending field.
    Schema { path: String, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format { offset, message } => {
                write!(f, "malformed tensor file at byte {offset}: {message}")
            }
            Error::Schema { path, message } => write!(f, "schema error at {path}: {message}"),
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
