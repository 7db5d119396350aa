//! Error type shared across the pipeline.

use alloc::string::String;
use core::fmt;

/// Errors produced by validation and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument failed. The message names the field.
    Validation(String),
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A loss or activation became NaN/Inf. Carries the diagnostic site.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "shape mismatch in {context}: expected {expected}, got {got}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

impl Error {
    pub fn validation(msg: impl fmt::Display) -> Self {
        Error::Validation(alloc::format!("{msg}"))
    }
}

pub type Result<T> = core::result::Result<T, Error>;
