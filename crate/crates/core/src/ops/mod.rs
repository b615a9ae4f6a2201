//! Structured network operations, each recorded on the [`Tape`](crate::tape::Tape).

pub mod batchnorm;
pub mod channels;
pub mod conv;
pub mod resample;

pub use batchnorm::{BatchNormState, BnMode};
pub use channels::softmax_values;
pub use conv::Conv3dSpec;
