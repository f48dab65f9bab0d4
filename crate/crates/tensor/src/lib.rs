//! Minimal dense tensor library with tape-based reverse-mode autodiff.
//!
//! Tensors are row-major; image tensors use batch-height-width-channels
//! layout. Training runs in `f32`, gradient checks in `f64` through the same
//! generic code.

pub mod adam;
pub mod checkpoint;
mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::AdamState;
pub use conv::Padding;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
