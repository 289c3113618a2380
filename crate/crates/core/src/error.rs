use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("degenerate input: row {row} has norm below 1e-12")]
    Degenerate { row: usize },
    #[error("softmax row {row} is entirely masked (-inf)")]
    AllMasked { row: usize },
    #[error("index {value} out of range (bound {bound})")]
    Index { value: usize, bound: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{file}:{line}: {msg}")]
    Validation {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("integrity error in {record}: {msg}")]
    Integrity { record: String, msg: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the command-line tool:
    /// 1 usage/configuration, 2 data validation, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Validation { .. }
            | Error::Data(_)
            | Error::Lookup(_)
            | Error::Integrity { .. }
            | Error::Index { .. } => 2,
            _ => 1,
        }
    }
}
