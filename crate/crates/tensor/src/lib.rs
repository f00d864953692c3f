//! Dense row-major tensors with tape-style reverse-mode automatic
//! differentiation.
//!
//! Every operation records a node holding its inputs and a gradient rule.
//! [`Tensor::backward`] replays those rules in reverse creation order, which
//! is always a valid reverse topological order because an op's inputs exist
//! before its output.
//!
//! Values are stored as `f64`. In the default [`Precision::F32`] mode every
//! op result is rounded to the nearest `f32` and matrix products run in
//! single precision, so tensors behave as 32-bit arrays. Gradient checks
//! switch the calling thread to [`Precision::F64`] with [`with_precision`].

mod error;
pub mod gradcheck;
pub mod gradsuite;
mod kernels;
mod ops;
mod precision;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::ConvParams;
pub use precision::{precision, with_precision, Precision};
pub use tensor::{BackwardFn, Tensor};
