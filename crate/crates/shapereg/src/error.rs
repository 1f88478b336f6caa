use std::fmt;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    InvalidConstraint(String),
    NonFinite(&'static str),
    Factorization(&'static str),
    Csv { line: usize, msg: String },
    Schema(String),
    ModelFormat(String),
    Solver(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            Error::InvalidConstraint(msg) => write!(f, "invalid constraint: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Factorization(what) => write!(f, "factorization failed: {what}"),
            Error::Csv { line, msg } => write!(f, "csv error at line {line}: {msg}"),
            Error::Schema(msg) => write!(f, "schema error: {msg}"),
            Error::ModelFormat(msg) => write!(f, "model format error: {msg}"),
            Error::Solver(msg) => write!(f, "solver error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
