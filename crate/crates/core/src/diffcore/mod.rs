//! Differentiable-computation substrate: tensors, tape, parameters,
//! optimizers and a finite-difference gradient oracle.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, ParamCheck};
pub use optim::{Adam, AdamHyper, Optimizer, Sgd};
pub use params::{Param, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
