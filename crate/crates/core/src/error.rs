use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("axis {axis} out of range for {shape}")]
    InvalidAxis { axis: usize, shape: Shape },
    #[error("element buffer of length {len} does not fill {shape}")]
    BufferLength { len: usize, shape: Shape },
    #[error("backward needs a scalar loss, got {0}")]
    NotScalar(Shape),
    #[error("loss is not connected to any tensor that requires grad")]
    DetachedLoss,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("layer {0} is not a PaCa layer")]
    NotPacaLayer(usize),
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("training hook failed: {0}")]
    Hook(String),
    #[error("{0}")]
    Invalid(String),
}
