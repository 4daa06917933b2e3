//! Minimal reverse-mode automatic differentiation.
//!
//! The engine records exactly the primitives the model uses (matrix
//! products, softmax, layer norm, GELU, gathers and a few reductions) and
//! ships its own finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    check_params, finite_difference_check, relative_error, ProbeResult, DEFAULT_STEP,
};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
