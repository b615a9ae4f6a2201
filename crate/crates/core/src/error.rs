use alloc::string::String;
use alloc::vec::Vec;

/// Errors surfaced by the tensor engine, the network and the data/metric helpers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor extents must be >= 1, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, got: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("reduce: axis {0} listed twice")]
    DuplicateAxis(usize),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("{op}: output extent on axis {axis} would be < 1")]
    ExtentCollapse { op: &'static str, axis: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran over this graph; record a new forward pass first")]
    TapeConsumed,
    #[error("unknown variable")]
    UnknownVar,
    #[error("focal loss: no labeled pixels")]
    NoLabeledPixels,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("class {0} has no pixels")]
    EmptyClass(u16),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}
