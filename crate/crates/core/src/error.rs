//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by public operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition (bad value, wrong range).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Object is in a state inconsistent with the requested operation.
    #[error("state error: {0}")]
    State(String),

    /// A numeric evaluation produced a non-finite result.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Manifest or config text could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint bytes are malformed or truncated.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
