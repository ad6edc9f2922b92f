use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: output extent ({extent} + 2*{pad} - {kernel}) is not divisible by stride {stride}")]
    NonIntegralOutput {
        op: &'static str,
        extent: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
    },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("batchnorm3d: training mode needs at least 2 elements per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("cross_entropy: label {label} at row {row} is outside the class range")]
    InvalidLabel { row: usize, label: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable belongs to a previous tape generation")]
    StaleVar,
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
