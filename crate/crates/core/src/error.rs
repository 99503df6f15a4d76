use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CateError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CateError {
    /// A caller-supplied argument is outside its valid range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The data violates an invariant (binary treatment, both arms, finiteness).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A CSV cell or header could not be interpreted.
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A learner or estimator could not produce a fit.
    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CateError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CateError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the input data rather than by estimation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            CateError::InvalidData(_)
                | CateError::Parse { .. }
                | CateError::Csv(_)
                | CateError::DimensionMismatch { .. }
        )
    }
}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> CateError {
    CateError::InvalidArgument(msg.into())
}

pub(crate) fn invalid_data(msg: impl Into<String>) -> CateError {
    CateError::InvalidData(msg.into())
}
