use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DeapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DeapError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("time step {dt} exceeds explicit-Euler stability bound {bound}")]
    Unstable { dt: f64, bound: f64 },

    #[error("non-finite field value at step {step}, cell (row {row}, col {col})")]
    NonFinite { step: u64, row: usize, col: usize },

    #[error("field value {value} out of bounds at step {step}, cell (row {row}, col {col})")]
    OutOfBounds { step: u64, row: usize, col: usize, value: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("electrode {electrode} at ({x_mm:.3}, {y_mm:.3}) mm lies outside the tissue margin")]
    FootprintOutside { electrode: usize, x_mm: f64, y_mm: f64 },

    #[error("insufficient support: {valid} valid electrodes, need at least 4")]
    InsufficientSupport { valid: usize },

    #[error("singular interpolation system")]
    Singular,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate mask: {cells} cells, need at least {required}")]
    DegenerateMask { cells: usize, required: usize },

    #[error("too few eligible episodes: {found} (need at least {required})")]
    TooFewEpisodes { found: usize, required: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("format error in {context}: {reason}")]
    Format { context: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DeapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DeapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        DeapError::InvalidParam {
            field,
            reason: reason.into(),
        }
    }
}
