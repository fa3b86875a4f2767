use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    Usage { op: &'static str, detail: String },

    #[error("{op}: non-finite value in {phase} pass")]
    NonFinite { op: &'static str, phase: &'static str },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn usage(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Usage {
            op,
            detail: detail.into(),
        }
    }
}
