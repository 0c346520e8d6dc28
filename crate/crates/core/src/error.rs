use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cube: {0}")]
    InvalidCube(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch: header declares {expected} values, payload holds {actual} bytes")]
    PayloadSize { expected: usize, actual: usize },

    #[error("non-finite value {value} at (row {row}, col {col}, band {band})")]
    NonFinite { row: usize, col: usize, band: usize, value: f32 },

    #[error("degenerate dynamic range: every value equals {0}")]
    DegenerateRange(f32),

    #[error("spatial size {height}x{width} is not divisible by {factor}")]
    Indivisible { height: usize, width: usize, factor: usize },

    #[error("unsupported scale factor {0} (expected 2, 3 or 4)")]
    Scale(usize),

    #[error("patch: {0}")]
    Patch(String),

    #[error("grouping: {0}")]
    Grouping(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero variance band {0}")]
    ZeroVarianceBand(usize),

    #[error("coordinate ({x}, {y}) outside {width}x{height} image")]
    OutOfRange { x: usize, y: usize, width: usize, height: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),

    #[error("numerical abort at step {step}: {what}")]
    Numerical { step: usize, what: String },

    #[error("image export: {0}")]
    Image(String),

    #[error(transparent)]
    Nn(#[from] hsisr_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch(_) => 2,
            Error::Numerical { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
