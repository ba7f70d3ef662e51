//! Consistency-guided prompt learning on a miniature dual-encoder
//! vision-language model.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix it to `f64`, which the training
//! and evaluation harnesses use throughout.

pub mod autodiff;
pub mod consistency;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Param = autodiff::Param<f64>;
