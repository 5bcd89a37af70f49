//! Tensor arithmetic, reverse-mode differentiation, Adam and gradient checking.

mod adam;
mod gradcheck;
mod init;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use gradcheck::{
    analytic_gradient, grad_check, loss_fn, max_relative_error, numeric_gradient, REL_ERR_FLOOR,
};
pub use init::Init;
pub use scalar::{stable_sigmoid, Scalar};
pub use tape::{bce_sum, Bound, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::{ParamId, ParamSet, Tensor};
