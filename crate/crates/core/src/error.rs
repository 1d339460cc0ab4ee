use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{t} lies outside the basis domain [{a}, {b}]")]
    Domain { t: f64, a: f64, b: f64 },

    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),

    #[error("reduction error: {0}")]
    Reduction(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("direction enumeration needs {required} seed tuples, cap is {cap}")]
    EnumerationTooLarge { required: u128, cap: u128 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Size(_)
            | Error::Domain { .. }
            | Error::Bandwidth(_)
            | Error::Reduction(_)
            | Error::Config(_)
            | Error::EnumerationTooLarge { .. }
            | Error::UnknownMethod(_) => ErrorKind::Validation,
            Error::GridMismatch(_)
            | Error::Grid(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::Numerical(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Data,
    Numerical,
}
