use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GesaError {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("instance {id}: {msg}")]
    InvalidInstance { id: String, msg: String },

    #[error("sequence: {0}")]
    Sequence(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("labels: {0}")]
    Labels(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activations in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl GesaError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            GesaError::Config(_) | GesaError::InvalidArgument(_) => ErrorKind::Usage,
            GesaError::NonFinite { .. } | GesaError::Diverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = GesaError> = std::result::Result<T, E>;
