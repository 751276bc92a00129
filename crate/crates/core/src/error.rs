use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("width mismatch: expected {expected}, got {got} ({context})")]
    WidthMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("ragged prompt batch: sequence {index} has length {got}, expected {expected}")]
    RaggedSequences {
        index: usize,
        expected: usize,
        got: usize,
    },

    #[error("unknown {kind} '{value}'")]
    UnknownVariant { kind: &'static str, value: String },

    #[error("empty feature map")]
    EmptyFeatureMap,

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("every pixel carries the ignore label")]
    AllIgnored,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("infeasible dataset spec: {0}")]
    InfeasibleSpec(String),

    #[error("empty split")]
    EmptySplit,

    #[error("config error for key '{key}': {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing run artifact: {0}")]
    MissingArtifact(String),

    #[error("missing parameter '{0}'")]
    MissingParam(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Whether this error stems from numerical divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
