//! Reverse-mode differentiation over a recorded tape.

mod boxloss;
pub(crate) mod conv;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use conv::{ConvGeom, PadMode};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GRADIENT_FLOOR, GradCheckReport};
pub use kernels::ResizeMode;
pub use tape::{Gradients, Tape, Var};
