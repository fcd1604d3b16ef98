//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{all_coords, grad_check, grad_check_params, relative_error};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
