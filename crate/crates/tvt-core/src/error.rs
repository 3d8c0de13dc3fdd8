//! Error type shared across the core crate.

use alloc::string::String;

/// Errors reported by model construction, training steps, and validation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoreError {
    /// A spec failed its validation rules.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A model that must stay frozen accumulated a gradient.
    #[error("freeze contract violated: {0}")]
    FreezeViolation(String),
    /// A configuration value is outside its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Checkpoint or state payload does not match the running spec.
    #[error("state mismatch: {0}")]
    StateMismatch(String),
    /// A loss or intermediate value became NaN/inf; the step aborted.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl CoreError {
    pub fn invalid_spec(msg: impl core::fmt::Display) -> Self {
        CoreError::InvalidSpec(alloc::format!("{msg}"))
    }

    pub fn shape(msg: impl core::fmt::Display) -> Self {
        CoreError::ShapeMismatch(alloc::format!("{msg}"))
    }

    pub fn frozen(msg: impl core::fmt::Display) -> Self {
        CoreError::FreezeViolation(alloc::format!("{msg}"))
    }

    pub fn non_finite(msg: impl core::fmt::Display) -> Self {
        CoreError::NonFinite(alloc::format!("{msg}"))
    }
}
