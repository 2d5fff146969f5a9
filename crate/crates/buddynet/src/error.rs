use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Input outside an operation's domain (log of non-positive, division by
    /// zero, non-positive temperature, ...).
    Domain { op: &'static str, detail: String },
    /// Invalid configuration, dataset, or argument.
    Validation(String),
    /// A loss or metric became non-finite; `detail` names the first offender.
    NonFinite { detail: String },
    Io(std::io::Error),
    /// Malformed or truncated file content.
    Format { what: String, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::NonFinite { detail } => write!(f, "non-finite value: {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format { what, detail } => write!(f, "format error in {what}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
