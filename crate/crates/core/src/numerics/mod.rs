//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use kernels::sinusoidal_positions;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{LrGroup, ParamList, ParamSet, Parameter, Tensor};
