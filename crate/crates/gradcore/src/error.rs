use thiserror::Error;

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a backward pass; reset it before reuse")]
    StaleTape,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GradError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
