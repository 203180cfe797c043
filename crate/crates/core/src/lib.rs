//! Block-wise mixture of low-rank experts, spectral expert allocation and a
//! multi-stage self-supervised depth loss suite, built on a small
//! reverse-mode tensor core.
// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape arithmetic is fallible on shape mismatch, so it cannot implement the operator traits.
#![allow(clippy::should_implement_trait)]
// Image stencils index several arrays with the same pixel coordinates.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
mod image_ops;
pub mod io;
pub mod losses;
pub mod mole;
pub mod optim;
pub mod report;
pub mod spectral;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use image_ops::BOUNDS_TOLERANCE;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
