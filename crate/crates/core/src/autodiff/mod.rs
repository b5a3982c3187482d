//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    analytic_gradient, compare, grad_check, numeric_gradient, GradCheckReport, NamedGrads, DEFAULT_STEP,
};
pub use graph::{sigmoid, Activation, Gradients, Graph, Var};
pub(crate) use graph::{bce_logit, log_sum_exp};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
