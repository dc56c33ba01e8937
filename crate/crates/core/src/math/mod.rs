//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
pub mod suite;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, param_difference_check};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{ParamId, ParamStore};
pub use suite::{op_suite, SuiteEntry};
pub use tensor::{argmax, Tensor};
