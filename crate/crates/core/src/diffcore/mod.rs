//! Dense tensors with reverse-mode automatic differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, LossFn, ParamCheck};
pub use graph::{Graph, Reduction, Var};
pub use params::{derive_seed, fnv1a, Init, ParameterStore, INIT_STD};
pub use tensor::{Scalar, Tensor};
