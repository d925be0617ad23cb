use std::path::PathBuf;

use moe_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = PlannerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: incompatible version `{found}`, expected `{expected}`")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("config hash mismatch: checkpoint {checkpoint}, expected {expected}")]
    HashMismatch { checkpoint: String, expected: String },

    #[error("router produced non-finite scores for sample {sample}")]
    NonFiniteScores { sample: usize },

    #[error("loss diverged to {value} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, value: f64 },

    #[error("planning sequence: {0}")]
    Sequence(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl PlannerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PlannerError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        PlannerError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            PlannerError::Config(_) | PlannerError::UnknownStrategy { .. } | PlannerError::HashMismatch { .. } => 2,
            PlannerError::Diverged { .. } | PlannerError::NonFiniteScores { .. } => 3,
            PlannerError::Io { .. } | PlannerError::Format { .. } | PlannerError::Version { .. } => 4,
            PlannerError::Tensor(_) | PlannerError::Sequence(_) | PlannerError::Invalid(_) => 1,
        }
    }
}
