//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected extent) disagree on shape.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An axis argument is out of range for the tensor's rank.
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    /// A caller broke a documented API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A config file or config value failed schema validation.
    #[error("config error: {0}")]
    Config(String),

    /// A token id is outside the vocabulary.
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    /// A checkpoint file is malformed or inconsistent with the config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An image file could not be parsed.
    #[error("image error: {0}")]
    Image(String),

    /// Training aborted (for example on a non-finite loss).
    #[error("training error at stage {stage} step {step}: {message}")]
    Training {
        stage: u8,
        step: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
