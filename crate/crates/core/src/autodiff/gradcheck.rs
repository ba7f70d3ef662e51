use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Builds a scalar from the given input variables.
pub type Build<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn eval_scalar(build: Build, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::eval();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Worst relative error between the backward pass and central differences
/// with step `h`, over every input element. The denominator is floored at
/// `floor` so near-zero gradients are compared absolutely.
pub fn max_relative_error(build: Build, inputs: &[Tensor<f64>], h: f64, floor: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map(|t| t.to_vec()).unwrap_or(vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval_scalar(build, &plus)? - eval_scalar(build, &minus)?) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
