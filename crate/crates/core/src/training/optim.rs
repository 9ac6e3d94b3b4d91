use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Checkpoint, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Weight decay applies to matrices only; biases and normalization affines
/// are left undecayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: OptimState::default(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let decay = if p.ndim() >= 2 { lr * self.weight_decay } else { 0.0 };
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= step + decay * *w;
            }
        }
        Ok(())
    }

    /// Store the moments as `opt/m/<name>` and `opt/v/<name>` entries.
    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        for (n, t) in &self.state.m {
            ck.insert(format!("opt/m/{n}"), t.clone())?;
        }
        for (n, t) in &self.state.v {
            ck.insert(format!("opt/v/{n}"), t.clone())?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, ck: &Checkpoint, step: u64) {
        self.state = OptimState {
            step,
            ..OptimState::default()
        };
        for (name, t) in ck.entries() {
            if let Some(n) = name.strip_prefix("opt/m/") {
                self.state.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("opt/v/") {
                self.state.v.insert(n.to_string(), t.clone());
            }
        }
    }
}

pub fn global_norm(grads: &[(String, Tensor)]) -> f64 {
    grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Linear warmup from `lr / warmup` to `lr`, constant afterwards.
pub fn learning_rate(lr: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * (step + 1) as f64 / warmup as f64
    }
}
