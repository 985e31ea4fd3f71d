//! Differentiable primitives. Each has a plain tensor function and a
//! [`Tape`](crate::tape::Tape) method recording its backward pass.

pub mod activation;
pub mod basic;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod resize;

pub use activation::{relu, sigmoid, softmax, softplus};
pub use basic::l2_normalize_rows;
pub use batchnorm::{batchnorm, BnMode, BnOptions, RunningStats};
pub use conv::{conv2d, Conv2dParams};
pub use linear::linear;
pub use loss::{binary_cross_entropy, cross_entropy_2d};
pub use resize::{bilinear_resize, flip_horizontal};
