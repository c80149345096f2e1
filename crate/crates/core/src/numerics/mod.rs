//! Dense tensors, a reverse-mode tape, and finite-difference checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{central_difference, grad_check, relative_error, DENOMINATOR_FLOOR};
pub use graph::{Binary, Gradients, Graph, ParamId, Unary, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
