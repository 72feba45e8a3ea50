//! Tensors, reverse-mode differentiation, seeded randomness and the
//! finite-difference oracle.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_gradient, max_relative_error, FdGradient};
pub use rng::{stream, SeededRng};
pub use tape::{Gradients, Segment, Tape, Var, MASK_FILL};
pub use tensor::Tensor;

/// Layer-normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
