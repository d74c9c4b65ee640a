//! Minimal reverse-mode differentiable numerics.
//!
//! Everything is `f64`. Tensors are dense and row-major; there is no
//! broadcasting beyond [`Graph::add_row`]. Gradient accumulation into a
//! [`ParamSet`] is additive and must be cleared explicitly with
//! [`ParamSet::zero_grad`] between optimizer steps.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, gradient_error, GradCheck, GradCheckReport};
pub use graph::{
    log_sigmoid, stable_sigmoid, BranchPattern, CustomOp, Gradients, Graph, ParamId, ParamSet, Var,
};
pub(crate) use tensor::gemm;
pub use tensor::Tensor;
