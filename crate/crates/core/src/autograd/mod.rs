//! Tape-based reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod ops;
mod tape;

pub use ops::{softmax, ConvGeom, ResamplePlan};
pub use tape::{Gradients, Tape, Var};
