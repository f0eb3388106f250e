use gradcore::GradError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("condition id {id} outside vocabulary of size {vocab}")]
    InvalidCondition { id: usize, vocab: usize },

    #[error("non-finite state at integration step {step}")]
    NonFiniteState { step: usize },

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },

    #[error("{0}")]
    InvalidInput(String),
}

impl CoreError {
    pub(crate) fn config(key: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidConfig {
            key,
            reason: reason.into(),
        }
    }

    /// True for failures caused by values leaving the finite range.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::Grad(GradError::NonFinite { .. }) | CoreError::NonFiniteState { .. }
        )
    }
}
