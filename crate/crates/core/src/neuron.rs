//! Leaky integrate-and-fire neurons with surrogate-gradient backward rules.
//!
//! Per element and SNN timestep t:
//!
//! ```text
//! U[t] = H[t-1] + I[t]
//! S[t] = Heaviside(U[t] - u_th)            (1 when U[t] >= u_th)
//! H[t] = u_reset * S[t] + gamma * U[t] * (1 - S[t])
//! ```
//!
//! with `H[-1] = 0`. The reset is hard: a firing element's membrane becomes
//! exactly `u_reset`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Surrogate {
    /// `a / (2 (1 + (pi/2 · a · x)^2))`
    #[default]
    Atan,
    /// `a / 2` on `|x| < 1/a`, zero elsewhere.
    Rectangular,
}

/// How the forward pass turns membrane potential into an output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpikeMode {
    /// Binary Heaviside spikes; the surrogate is used only when differentiating.
    #[default]
    Spike,
    /// Replace the Heaviside by the antiderivative of the surrogate, so the
    /// backward rule is the exact derivative of the forward pass. Used for
    /// finite-difference gradient checks.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifParams {
    pub u_th: f64,
    pub u_reset: f64,
    pub gamma: f64,
    pub surrogate_width: f64,
    pub surrogate: Surrogate,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            u_th: 1.0,
            u_reset: 0.0,
            gamma: 0.5,
            surrogate_width: 2.0,
            surrogate: Surrogate::Atan,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::contract(format!("decay gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.u_reset < self.u_th) {
            return Err(Error::contract(format!(
                "u_reset ({}) must be below u_th ({})",
                self.u_reset, self.u_th
            )));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::contract(format!(
                "surrogate width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    /// d(spike)/dU evaluated at `x = U - u_th`.
    #[inline]
    pub fn surrogate_grad(&self, x: f64) -> f64 {
        let a = self.surrogate_width;
        match self.surrogate {
            Surrogate::Atan => {
                let z = FRAC_PI_2 * a * x;
                a / (2.0 * (1.0 + z * z))
            }
            Surrogate::Rectangular => {
                if x.abs() < 1.0 / a {
                    a / 2.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Smooth stand-in for the Heaviside whose derivative is `surrogate_grad`.
    #[inline]
    pub fn relaxed_spike(&self, x: f64) -> f64 {
        let a = self.surrogate_width;
        match self.surrogate {
            Surrogate::Atan => 0.5 + (FRAC_PI_2 * a * x).atan() / PI,
            Surrogate::Rectangular => (0.5 * a * x + 0.5).clamp(0.0, 1.0),
        }
    }

    #[inline]
    fn fire(&self, u: f64, mode: SpikeMode) -> f64 {
        match mode {
            SpikeMode::Spike => {
                if u >= self.u_th {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeMode::Relaxed => self.relaxed_spike(u - self.u_th),
        }
    }

    #[inline]
    fn next_membrane(&self, u: f64, s: f64) -> f64 {
        self.u_reset * s + self.gamma * u * (1.0 - s)
    }
}

/// Membrane potentials carried between SNN timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub membrane: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            membrane: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// One SNN timestep for a whole layer.
pub fn lif_step(input: &Tensor, state: &LifState, params: &LifParams) -> Result<(Tensor, LifState)> {
    params.validate()?;
    if input.shape() != state.membrane.shape() {
        return Err(Error::dim(format!(
            "input {:?} does not match membrane {:?}",
            input.shape(),
            state.membrane.shape()
        )));
    }
    let mut spikes = Vec::with_capacity(input.len());
    let mut membrane = Vec::with_capacity(input.len());
    for (&i, &h) in input.data().iter().zip(state.membrane.data()) {
        let u = h + i;
        let s = params.fire(u, SpikeMode::Spike);
        spikes.push(s);
        membrane.push(params.next_membrane(u, s));
    }
    Ok((
        Tensor::new(input.shape().to_vec(), spikes)?,
        LifState {
            membrane: Tensor::new(input.shape().to_vec(), membrane)?,
        },
    ))
}

/// Run a layer over inputs whose first axis is SNN time, from zero membrane.
pub fn lif_sequence(inputs: &Tensor, params: &LifParams) -> Result<Tensor> {
    if inputs.ndim() == 0 || inputs.shape()[0] == 0 {
        return Err(Error::contract("lif_sequence needs at least one timestep"));
    }
    let mut g = Graph::inference();
    let x = g.constant(inputs.clone());
    let s = lif(&mut g, x, 0, params, SpikeMode::Spike)?;
    Ok(g.value(s).clone())
}

/// Elementwise surrogate derivative with the atan shape.
pub fn surrogate_gradient(u_minus_threshold: &Tensor, surrogate_width: f64) -> Result<Tensor> {
    if !(surrogate_width > 0.0) {
        return Err(Error::contract(format!(
            "surrogate width must be positive, got {surrogate_width}"
        )));
    }
    let p = LifParams {
        surrogate_width,
        ..LifParams::default()
    };
    Ok(u_minus_threshold.map(|x| p.surrogate_grad(x)))
}

struct LifFn {
    params: LifParams,
    time_axis_layout: (usize, usize, usize),
    /// membrane potential U[t] before firing, per element
    potentials: Vec<f64>,
}

impl Function for LifFn {
    fn name(&self) -> &'static str {
        "lif"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (outer, steps, inner) = self.time_axis_layout;
        let p = &self.params;
        let s = output.data();
        let go = grad.data();
        let mut gi = vec![0.0; s.len()];
        for o in 0..outer {
            for e in 0..inner {
                // gradient w.r.t. H[t], flowing back from step t+1
                let mut g_h = 0.0;
                for t in (0..steps).rev() {
                    let idx = (o * steps + t) * inner + e;
                    let u = self.potentials[idx];
                    let st = s[idx];
                    let ds_du = p.surrogate_grad(u - p.u_th);
                    let g_s = go[idx] + g_h * (p.u_reset - p.gamma * u);
                    let g_u = g_s * ds_du + g_h * p.gamma * (1.0 - st);
                    gi[idx] = g_u;
                    g_h = g_u;
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), gi).expect("same shape"))]
    }
}

/// Apply LIF dynamics along `time_axis` of `x` (input currents), starting
/// from zero membrane. Returns the spike tensor (same shape).
pub fn lif(g: &mut Graph, x: Var, time_axis: usize, params: &LifParams, mode: SpikeMode) -> Result<Var> {
    params.validate()?;
    let shape = g.shape(x).to_vec();
    if time_axis >= shape.len() || shape[time_axis] == 0 {
        return Err(Error::contract(format!(
            "time axis {time_axis} invalid or empty for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..time_axis].iter().product();
    let steps = shape[time_axis];
    let inner: usize = shape[time_axis + 1..].iter().product();
    let input = g.value(x).data();
    let mut spikes = vec![0.0; input.len()];
    let mut potentials = vec![0.0; input.len()];
    for o in 0..outer {
        for e in 0..inner {
            let mut h = 0.0;
            for t in 0..steps {
                let idx = (o * steps + t) * inner + e;
                let u = h + input[idx];
                let s = params.fire(u, mode);
                potentials[idx] = u;
                spikes[idx] = s;
                h = params.next_membrane(u, s);
            }
        }
    }
    let out = Tensor::new(shape, spikes)?;
    Ok(g.apply(
        &[x],
        out,
        LifFn {
            params: *params,
            time_axis_layout: (outer, steps, inner),
            potentials,
        },
    ))
}
