//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use gradcheck::{compare_with_central_differences, finite_difference_check};
pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use param::{ParamId, ParamRole, ParamStore, Parameter};
pub use tensor::Tensor;
