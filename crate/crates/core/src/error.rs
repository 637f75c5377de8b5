use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("validation failed for image `{id}`: {reason}")]
    Validation { id: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("training diverged at step {step}: total loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Load { .. } => "load",
            Error::Validation { .. } => "validation",
            Error::Argument(_) => "argument",
            Error::Shape { .. } => "shape",
            Error::Generation(_) => "generation",
            Error::Sampling(_) => "sampling",
            Error::Inference(_) => "inference",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingParam(_) => "missing_param",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
