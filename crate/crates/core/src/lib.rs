//! Context encoding networks on a small reverse-mode autodiff engine.

pub mod checks;
pub mod context;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod syncbn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
