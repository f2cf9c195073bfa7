//! Dense row-major tensors with a tape-based reverse-mode differentiator.
//!
//! Values are recorded on a [`Tape`] as operations execute. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! [`Gradients`] for every node that depends on a gradient-tracked leaf.
//!
//! The element type is generic over [`Real`]: training runs in `f32` and
//! gradient checks run the same code in `f64`.

mod error;
pub mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::TensorError;
pub use params::{BoundParams, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
