//! Forward and backward kernels for the differentiable operator set.
//!
//! These are plain functions over [`Tensor`](crate::Tensor) values; the
//! [`Tape`](crate::tape::Tape) records which ones ran and chains their
//! backward rules.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod linalg;
pub mod loss;

pub use activation::{leaky_relu, relu, sigmoid, softmax};
pub use conv::{conv2d, conv_transpose2d, ConvSpec};
pub use dense::dense;
pub use loss::{cross_entropy_loss, mse_loss};
