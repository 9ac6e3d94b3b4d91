//! Central finite-difference gradient checks against the autodiff engine.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Relative error floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between backprop and central differences over every
/// element of every input. `f` must build a scalar from the given leaves.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_coordinates(inputs, &coords, h, f)
}

/// Like [`check_gradients`] but only at the listed `(input, element)` pairs.
pub fn check_coordinates<F>(inputs: &[Tensor], coords: &[(usize, usize)], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        let numeric = numeric_gradient(inputs, i, j, h, &f)?;
        worst = worst.max(relative_error(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}

pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

pub fn numeric_gradient<F>(inputs: &[Tensor], i: usize, j: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut shifted = inputs.to_vec();
        shifted[i].data_mut()[j] += delta;
        let mut g = Graph::inference();
        let vars: Vec<Var> = shifted.into_iter().map(|t| g.constant(t)).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}
