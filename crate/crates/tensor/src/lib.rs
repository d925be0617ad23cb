//! Dense `f64` tensors, a reverse-mode autodiff tape, and the small set of
//! neural-network blocks the planner is built from.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod nn;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{wrap_angle, Binary, Gradients, Graph, Unary, Var};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
