//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor, schedule, field, sampler, and cost operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape is degenerate (zero-sized dimension) or inconsistent
    /// with its backing data.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A scalar argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A field model was asked to evaluate at a resolution it has not
    /// prepared. Call `prepare` for every stage resolution first.
    #[error("resolution {0}x{1} is not prepared on this model")]
    ResolutionNotPrepared(u32, u32),

    /// Dense covariance work is capped so that everything stays
    /// desk-verifiable.
    #[error("resolution {h}x{w} exceeds the dense-covariance budget of {budget} pixels; use a smaller resolution")]
    ResolutionBudget { h: u32, w: u32, budget: u32 },

    /// The operation is not defined for this model or configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Pipeline or experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor file I/O or format violation.
    #[error("tensor file error: {0}")]
    TensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
