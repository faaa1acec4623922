use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Rejected input value (degenerate box, out-of-range score, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Tensor or record dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Infeasible or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Records that violate their schema or reference unknown ids.
    #[error("validation error: {0}")]
    Validation(String),
    /// Scene generation could not satisfy its placement constraints.
    #[error("generation failed: {0}")]
    Generation(String),
    /// Non-finite values appeared during training.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
