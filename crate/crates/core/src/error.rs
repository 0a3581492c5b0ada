use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum M3Error {
    #[error("index ({row}, {col}) out of bounds for a {rows}x{cols} count table")]
    Bounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("cannot decrement empty cell ({0}, {1})")]
    EmptyCell(usize, usize),
    #[error("share weights must satisfy omega + omega1 + omega2 = 1 with each in [0, 1]; got ({0}, {1}, {2})")]
    ShareWeights(f64, f64, f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(String),
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, M3Error>;

impl M3Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        M3Error::Io {
            path: path.into(),
            source,
        }
    }
}
