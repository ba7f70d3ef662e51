use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::kernels;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Adds `g` to the stored gradient.
    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::shape("accumulate_grad", &[self.value.shape(), g.shape()]));
        }
        match &mut self.grad {
            Some(acc) => kernels::axpy(acc.data_mut(), g.data(), T::one()),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v <- momentum * v + grad; p <- p - lr * v`.
///
/// Gradients are cleared after the update. `velocity` holds one buffer per
/// parameter, in order, and is created lazily.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    velocity: &mut Vec<Vec<T>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "sgd needs lr > 0 and 0 <= momentum < 1, got lr={lr} momentum={momentum}"
        )));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    if velocity.is_empty() {
        *velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
    }
    if velocity.len() != params.len() {
        return Err(Error::Config(format!(
            "momentum state holds {} buffers for {} parameters",
            velocity.len(),
            params.len()
        )));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        let g = p.grad.take().expect("checked above");
        if v.len() != g.len() {
            return Err(Error::shape("sgd_step", &[&[v.len()], g.shape()]));
        }
        for (vi, &gi) in v.iter_mut().zip(g.data()) {
            *vi = mu * *vi + gi;
        }
        kernels::axpy(p.value.data_mut(), v, -lr);
    }
    Ok(())
}

/// Optimizer state for [`sgd_step`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(bound = "T: Scalar")]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        sgd_step(params, &mut self.velocity, self.lr, self.momentum)
    }
}
