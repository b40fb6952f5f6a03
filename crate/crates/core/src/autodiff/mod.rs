//! Tape-based reverse-mode differentiation over the tensor kernels.

mod check;
mod graph;

pub use check::{finite_diff_grad, grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck, DEFAULT_EPS};
pub use graph::{DropoutMode, Gradients, Graph, NodeId};
