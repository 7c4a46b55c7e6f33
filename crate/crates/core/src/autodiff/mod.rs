//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, gradient, FdReport};
pub use tape::{sinusoidal_embedding, GradMap, Tape, Unary, Var};
pub use tensor::Tensor;
