//! Error taxonomy shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure in {stage} at step {step}{}: {detail}",
            frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    NumericFailure {
        stage: String,
        step: usize,
        frame: Option<usize>,
        detail: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(stage: &str, step: usize, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            stage: stage.to_string(),
            step,
            frame: None,
            detail: detail.into(),
        }
    }

    pub fn numeric_frame(stage: &str, step: usize, frame: usize, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            stage: stage.to_string(),
            step,
            frame: Some(frame),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 2,
            Error::NumericFailure { .. } => 3,
            Error::MissingArtifact(_) | Error::NotFound(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
