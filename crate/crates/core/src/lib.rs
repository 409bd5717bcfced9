//! Overlap-aware view alignment for self-supervised pretraining on 3D volumes.
//!
//! Paired crops with a controlled overlap fraction are encoded by a student
//! and an EMA teacher; features inside the shared region are extracted with
//! 3D ROI alignment and compared by cosine, NT-Xent or Gram losses, next to a
//! masked-reconstruction objective. A rank-aggregation harness covers the
//! evaluation arithmetic.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consts;
mod error;
pub mod gradsuite;
pub mod losses;
pub mod nets;
pub mod rank;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod views;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{DType, Gradients, Tape, Tensor, Var};
