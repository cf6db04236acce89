use std::path::PathBuf;

use thiserror::Error;

use crate::nn::Network;

pub type Result<T> = std::result::Result<T, CfpError>;

#[derive(Debug, Error)]
pub enum CfpError {
    #[error("layer {layer} ({kind}): expected shape {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {layer} ({kind}) feeds layer {next} ({next_kind}): {detail}")]
    Incompatible {
        layer: usize,
        kind: &'static str,
        next: usize,
        next_kind: &'static str,
        detail: String,
    },

    #[error("max-pool needs even spatial dims, got {h}x{w} at layer {layer}")]
    OddPool { layer: usize, h: usize, w: usize },

    #[error("label {label} at position {index} is outside [0, {classes})")]
    LabelRange { index: usize, label: usize, classes: usize },

    #[error("non-finite value produced by {what}")]
    NonFinite { what: String },

    #[error("filter {filter} of layer {layer} has zero variance")]
    DegenerateFilter { layer: usize, filter: usize },

    #[error("layer {layer} is not a {expected} layer")]
    WrongLayer { layer: usize, expected: &'static str },

    #[error("layer {layer}: {detail}")]
    Quota { layer: usize, detail: String },

    #[error("invalid prune plan for layer {layer}: {detail}")]
    Plan { layer: usize, detail: String },

    #[error("idx parse error at byte {offset}: {detail}")]
    Idx { offset: usize, detail: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("optimization diverged at step {step}")]
    Diverged {
        step: usize,
        /// Network as it was before the step that produced the non-finite loss.
        last_valid: Box<Network>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CfpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes (2 is left for usage errors).
    pub fn exit_code(&self) -> i32 {
        match self {
            CfpError::Io { .. } => 3,
            CfpError::Config(_) => 4,
            CfpError::Idx { .. } | CfpError::Dataset(_) | CfpError::LabelRange { .. } => 5,
            CfpError::Checkpoint(_) => 6,
            CfpError::Diverged { .. } | CfpError::NonFinite { .. } => 7,
            _ => 1,
        }
    }
}
