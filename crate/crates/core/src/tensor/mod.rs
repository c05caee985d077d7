//! Minimal reverse-mode automatic differentiation.

mod array;
mod gradcheck;
mod optim;
mod param;
mod tape;

pub use array::{Real, Tensor};
pub use gradcheck::{grad_check, grad_check_on, grad_check_params, GradCheckEntry, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
