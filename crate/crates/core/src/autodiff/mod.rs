//! Reverse-mode differentiation over dense tensors with exactly the
//! operators the network needs, plus finite-difference checking and Adam.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::Padding;
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use store::{Param, ParameterStore};
pub use tensor::{Scalar, Tensor};

