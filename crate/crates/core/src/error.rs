use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid gaussian primitive: {0}")]
    InvalidPrimitive(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
