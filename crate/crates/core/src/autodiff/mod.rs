//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;

pub use graph::{Graph, OpKind, Var, NORM_EPS};
pub use optim::{sgd_step, Param, Sgd};

#[cfg(test)]
mod tests;
