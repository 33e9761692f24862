//! Crate-wide error type.

use thiserror::Error;

use crate::optim::LossTrace;

#[derive(Debug, Error)]
pub enum PanoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("aspect ratio: width {width} must equal 2 x height {height}")]
    AspectRatio { height: usize, width: usize },

    #[error("singular point: the zero vector has no spherical angles")]
    SingularPoint,

    #[error("degenerate coverage: no valid pixels remain")]
    DegenerateCoverage,

    #[error("usage: {0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize, trace: LossTrace },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PanoError>;

impl PanoError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PanoError::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PanoError::Io {
            path: path.into(),
            source,
        }
    }
}
