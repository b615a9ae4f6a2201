//! Tensor engine, 3D fully-convolutional network, spatial propagation
//! refinement, training loop, data helpers and accuracy metrics for
//! hyperspectral pixel classification.
//!
//! The crate is `no_std` (with `alloc`); enable the `std` feature for faster
//! matrix kernels on hosted targets.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// Negated comparisons deliberately reject NaN; index loops walk several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod cspn;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Elementwise, Reduction, Tape, Var};
pub use tensor::{Fill, Tensor};
