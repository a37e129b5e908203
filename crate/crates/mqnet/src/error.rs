//! Error type shared across the crate.

use std::fmt;

/// Errors emitted by tensor ops, model assembly, data handling, and I/O.
#[derive(Debug)]
pub enum MqError {
    /// Two shapes that must agree do not. `op` names the operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single shape or axis is invalid for the operation.
    InvalidDimension { op: &'static str, detail: String },
    /// A forward op produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Tape misuse (double backward, missing node, ...).
    Tape(String),
    /// Invalid argument outside of shape concerns (bad rate, empty batch, ...).
    InvalidArgument(String),
    /// Dataset or corpus content violates its contract.
    Data(String),
    /// Configuration rejected.
    Config(String),
    /// Filesystem or codec failure.
    Io(String),
}

impl fmt::Display for MqError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MqError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            MqError::InvalidDimension { op, detail } => write!(f, "{op}: {detail}"),
            MqError::NonFinite { op } => write!(f, "{op}: produced non-finite values"),
            MqError::Tape(msg) => write!(f, "tape: {msg}"),
            MqError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            MqError::Data(msg) => write!(f, "data: {msg}"),
            MqError::Config(msg) => write!(f, "config: {msg}"),
            MqError::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for MqError {}

impl From<std::io::Error> for MqError {
    fn from(e: std::io::Error) -> Self {
        MqError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MqError>;
