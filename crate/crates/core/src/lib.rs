//! Open-vocabulary detection on top of a frozen, contrastively pretrained
//! vision-language backbone.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
pub use geometry::BoxRegion;
pub use tensor::{Real, Tensor};
