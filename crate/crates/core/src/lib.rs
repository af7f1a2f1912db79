//! Convolutional networks that "rethink" their prediction: the class
//! posterior of one pass is fed back through small affine heads into
//! per-channel emphasis vectors that re-weight convolution outputs on the
//! next pass. The network is unrolled `T` times, every pass is supervised,
//! and training is backpropagation through time.

pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod rethink;
pub mod tensor;
pub mod unroll;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
