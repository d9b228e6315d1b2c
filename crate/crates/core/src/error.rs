//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal mass {residual:.3e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("forward cache is stale: built for state revision {cache_revision}, state is at {state_revision}")]
    StaleCache {
        cache_revision: u64,
        state_revision: u64,
    },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("bad magic in {what}: expected {expected}, found {found}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint shape disagreement for tensor {name}: header says {header_rows}x{header_cols}, config implies {expected_rows}x{expected_cols}")]
    ShapeDisagreement {
        name: String,
        header_rows: usize,
        header_cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },

    #[error("csv schema mismatch: {0}")]
    CsvSchema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
