//! Tensor-level reverse-mode automatic differentiation.

pub mod check;
pub mod kernels;
pub mod loss;
pub mod tape;

pub use check::{finite_difference_gradient, relative_error};
pub use kernels::{conv2d, relu};
pub use loss::pixel_cross_entropy;
pub use tape::{GradientMap, Tape, Var};
