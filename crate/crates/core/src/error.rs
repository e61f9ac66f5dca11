use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Error classes surfaced by the core library. The variant name doubles as the
/// machine-readable error class printed by the command-line tool.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("geotransform is not invertible (determinant {0})")]
    InvalidTransform(f64),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("loss target must be binary, found {0}")]
    InvalidTarget(f64),
    #[error("loss weights sum to zero")]
    InvalidWeights,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// Stable class name for logs and exit diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidPolygon(_) => "InvalidPolygon",
            Error::EmptyMask => "EmptyMask",
            Error::InvalidTransform(_) => "InvalidTransform",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidTarget(_) => "InvalidTarget",
            Error::InvalidWeights => "InvalidWeights",
            Error::EmptyDataset => "EmptyDataset",
            Error::Diverged(_) => "TrainingDiverged",
            Error::Inference(_) => "InferenceError",
            Error::Config(_) => "ConfigError",
        }
    }
}
