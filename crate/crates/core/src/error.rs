use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A computation produced NaN/Inf or failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Inputs are structurally valid but carry no usable information.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// The computation graph contains an operation without the derivative
    /// rule required by the requested differentiation order.
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
