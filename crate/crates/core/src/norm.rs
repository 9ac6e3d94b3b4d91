//! Threshold-dependent normalization: tdLN, tdBN and their progressive blend
//! PTBN, plus folding of inference-time tdBN into a preceding linear layer.
//!
//! Inputs use the layout `[B, N, T, D]` (batch, context, SNN time, channel).
//! All variants standardize to `alpha * u_th * (x - mu) / sqrt(var + eps)` and
//! then apply a per-channel affine `lambda * y + beta`. tdLN takes statistics
//! over `D` at each `(b, n, t)`; tdBN takes per-channel statistics pooled over
//! `B, N, T` (or over `B, N` per timestep when configured).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatPooling {
    /// One `(mu, var)` per channel over batch, context and SNN time.
    #[default]
    Pooled,
    /// One `(mu, var)` per `(timestep, channel)` over batch and context.
    PerTimestep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub pooling: StatPooling,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-5,
            momentum: 0.1,
            pooling: StatPooling::Pooled,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::contract(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::contract(format!("momentum must lie in (0, 1], got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Running tdBN statistics, initialized to mean 0 and variance 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            var: vec![1.0; len],
        }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Progressive blend state. `theta = 1` is pure tdLN, `theta = 0` pure tdBN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtbnState {
    pub theta: f64,
    pub t_p: u64,
    pub t_cur: u64,
}

impl PtbnState {
    pub fn new(t_p: u64) -> Result<Self> {
        Self::at(t_p, 0)
    }

    pub fn at(t_p: u64, t_cur: u64) -> Result<Self> {
        Ok(Self {
            theta: theta_schedule(t_p, t_cur)?,
            t_p,
            t_cur,
        })
    }

    pub fn advance_to(&mut self, t_cur: u64) {
        self.t_cur = t_cur;
        self.theta = theta_schedule(self.t_p, t_cur).expect("t_p validated at construction");
    }
}

/// `(t_p - t_cur) / t_p`, clamped to `[0, 1]`.
pub fn theta_schedule(t_p: u64, t_cur: u64) -> Result<f64> {
    if t_p == 0 {
        return Err(Error::contract("PTBN step budget t_p must be positive"));
    }
    Ok(((t_p as f64 - t_cur as f64) / t_p as f64).clamp(0.0, 1.0))
}

/// How elements are grouped for statistics.
#[derive(Clone, Copy, Debug)]
enum Groups {
    /// consecutive rows of this width (tdLN)
    Rows(usize),
    /// elements sharing `flat % period` (tdBN)
    Columns(usize),
}

impl Groups {
    fn count(self, len: usize) -> usize {
        match self {
            Groups::Rows(w) => len / w,
            Groups::Columns(p) => p,
        }
    }

    /// Chunk width such that each chunk maps to groups by a simple rule.
    fn width(self) -> usize {
        match self {
            Groups::Rows(w) | Groups::Columns(w) => w.max(1),
        }
    }

    /// Visit `(group, element index)` for every element, chunk by chunk.
    #[inline]
    fn for_each(self, len: usize, mut f: impl FnMut(usize, usize)) {
        let w = self.width();
        for (r, base) in (0..len).step_by(w).enumerate() {
            for j in 0..w.min(len - base) {
                let k = match self {
                    Groups::Rows(_) => r,
                    Groups::Columns(_) => j,
                };
                f(k, base + j);
            }
        }
    }
}

/// One standardization branch of a fused normalization.
struct Branch {
    groups: Groups,
    weight: f64,
    /// (x - mu) / sqrt(var + eps)
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    group_size: f64,
}

/// `y = lambda * factor * Σ_b weight_b * xhat_b + beta`, with `lambda` and
/// `beta` broadcast over the channel axis.
struct Normalize {
    factor: f64,
    channels: usize,
    branches: Vec<Branch>,
}

impl Normalize {
    fn z(&self, i: usize) -> f64 {
        self.factor * self.branches.iter().map(|b| b.weight * b.xhat[i]).sum::<f64>()
    }
}

impl Function for Normalize {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = self.channels;
        let g = grad.data();
        let lam = inputs[1].data();
        let mut dlam = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        // h = dL/dz * factor
        let mut h = vec![0.0; g.len()];
        for (r, (gr, hr)) in g.chunks(d).zip(h.chunks_mut(d)).enumerate() {
            for j in 0..d {
                let i = r * d + j;
                dbeta[j] += gr[j];
                dlam[j] += gr[j] * self.z(i);
                hr[j] = gr[j] * lam[j] * self.factor;
            }
        }
        // dx = Σ_b weight_b * rstd * (h - mean(h) - xhat * mean(h * xhat))
        let mut dx = vec![0.0; g.len()];
        for b in &self.branches {
            let ng = b.rstd.len();
            let mut mh = vec![0.0; ng];
            let mut mhx = vec![0.0; ng];
            b.groups.for_each(g.len(), |k, i| {
                mh[k] += h[i];
                mhx[k] += h[i] * b.xhat[i];
            });
            for k in 0..ng {
                mh[k] /= b.group_size;
                mhx[k] /= b.group_size;
            }
            b.groups.for_each(g.len(), |k, i| {
                dx[i] += b.weight * b.rstd[k] * (h[i] - mh[k] - b.xhat[i] * mhx[k]);
            });
        }
        vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape")),
            Some(Tensor::new(inputs[1].shape().to_vec(), dlam).expect("same shape")),
            Some(Tensor::new(inputs[2].shape().to_vec(), dbeta).expect("same shape")),
        ]
    }
}

struct BatchMoments {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn moments(x: &[f64], groups: Groups) -> BatchMoments {
    let ng = groups.count(x.len());
    let n = (x.len() / ng.max(1)) as f64;
    let mut mean = vec![0.0; ng];
    groups.for_each(x.len(), |k, i| mean[k] += x[i]);
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; ng];
    groups.for_each(x.len(), |k, i| {
        let d = x[i] - mean[k];
        var[k] += d * d;
    });
    var.iter_mut().for_each(|s| *s /= n);
    BatchMoments { mean, var }
}

/// Fused standardize-blend-affine over the given `(groups, weight)` branches.
/// Returns the output and the batch moments of each branch.
fn normalize(
    g: &mut Graph,
    x: Var,
    lambda: Var,
    beta: Var,
    parts: &[(Groups, f64)],
    factor: f64,
    eps: f64,
) -> Result<(Var, Vec<BatchMoments>)> {
    let d = channels(g, x)?;
    if g.shape(lambda) != [d] || g.shape(beta) != [d] {
        return Err(Error::dim(format!(
            "affine parameters {:?} and {:?} do not match {d} channels",
            g.shape(lambda),
            g.shape(beta)
        )));
    }
    let xv = g.value(x);
    let xd = xv.data();
    let mut branches = Vec::with_capacity(parts.len());
    let mut stats = Vec::with_capacity(parts.len());
    for &(groups, weight) in parts {
        let m = moments(xd, groups);
        let rstd: Vec<f64> = m.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        groups.for_each(xd.len(), |k, i| xhat[i] = (xd[i] - m.mean[k]) * rstd[k]);
        branches.push(Branch {
            groups,
            weight,
            xhat,
            rstd,
            group_size: (xd.len() / groups.count(xd.len()).max(1)) as f64,
        });
        stats.push(m);
    }
    let f = Normalize {
        factor,
        channels: d,
        branches,
    };
    let (lam, bet) = (g.value(lambda).data(), g.value(beta).data());
    let out: Vec<f64> = (0..xd.len()).map(|i| f.z(i) * lam[i % d] + bet[i % d]).collect();
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    Ok((g.apply(&[x, lambda, beta], out, f), stats))
}

fn channels(g: &Graph, x: Var) -> Result<usize> {
    match g.shape(x).last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::contract(format!(
            "normalization needs a non-empty channel axis, got shape {:?}",
            g.shape(x)
        ))),
    }
}

fn stat_period(g: &Graph, x: Var, pooling: StatPooling) -> Result<usize> {
    let shape = g.shape(x);
    let d = channels(g, x)?;
    match pooling {
        StatPooling::Pooled => Ok(d),
        StatPooling::PerTimestep => {
            if shape.len() < 2 {
                return Err(Error::contract("per-timestep statistics need a time axis before channels"));
            }
            Ok(shape[shape.len() - 2] * d)
        }
    }
}

fn affine(g: &mut Graph, y: Var, lambda: Var, beta: Var) -> Result<Var> {
    let s = g.mul(y, lambda)?;
    g.add(s, beta)
}

/// Normalize over the channel axis only (no running statistics).
pub fn tdln(g: &mut Graph, x: Var, lambda: Var, beta: Var, cfg: &NormConfig, u_th: f64) -> Result<Var> {
    let d = channels(g, x)?;
    let (y, _) = normalize(g, x, lambda, beta, &[(Groups::Rows(d), 1.0)], cfg.alpha * u_th, cfg.epsilon)?;
    Ok(y)
}

/// Per-channel normalization. In training, batch statistics are used and
/// folded into `stats` by momentum; at inference `stats` is used as is.
pub fn tdbn(
    g: &mut Graph,
    x: Var,
    lambda: Var,
    beta: Var,
    cfg: &NormConfig,
    u_th: f64,
    stats: &mut RunningStats,
    training: bool,
) -> Result<Var> {
    let period = period_checked(g, x, cfg, stats)?;
    if training {
        let parts = [(Groups::Columns(period), 1.0)];
        let (y, m) = normalize(g, x, lambda, beta, &parts, cfg.alpha * u_th, cfg.epsilon)?;
        stats.update(&m[0].mean, &m[0].var, cfg.momentum);
        return Ok(y);
    }
    let y = {
        let (scale, shift) = inference_affine(stats, cfg, u_th);
        let tail = stat_shape(g.shape(x), cfg.pooling);
        let sv = g.constant(Tensor::new(tail.clone(), scale)?);
        let hv = g.constant(Tensor::new(tail, shift)?);
        let y = g.mul(x, sv)?;
        g.add(y, hv)?
    };
    affine(g, y, lambda, beta)
}

/// Statistics period of `x`, checked against the running statistics.
fn period_checked(g: &Graph, x: Var, cfg: &NormConfig, stats: &RunningStats) -> Result<usize> {
    let period = stat_period(g, x, cfg.pooling)?;
    if stats.mean.len() != period {
        return Err(Error::dim(format!(
            "running statistics hold {} entries, input needs {period}",
            stats.mean.len()
        )));
    }
    Ok(period)
}

fn stat_shape(shape: &[usize], pooling: StatPooling) -> Vec<usize> {
    match pooling {
        StatPooling::Pooled => vec![shape[shape.len() - 1]],
        StatPooling::PerTimestep => shape[shape.len() - 2..].to_vec(),
    }
}

/// `(scale, shift)` with `standardized = x * scale + shift` from running stats.
fn inference_affine(stats: &RunningStats, cfg: &NormConfig, u_th: f64) -> (Vec<f64>, Vec<f64>) {
    let c = cfg.alpha * u_th;
    let scale: Vec<f64> = stats.var.iter().map(|v| c / (v + cfg.epsilon).sqrt()).collect();
    let shift = stats.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
    (scale, shift)
}

/// `theta * tdLN(x) + (1 - theta) * tdBN(x)`, with running statistics in
/// place of batch statistics at inference.
///
/// Running statistics are updated in every training call, including while
/// `theta = 1`, so they have converged by the time the blend reaches tdBN.
#[allow(clippy::too_many_arguments)]
pub fn ptbn(
    g: &mut Graph,
    x: Var,
    lambda: Var,
    beta: Var,
    cfg: &NormConfig,
    u_th: f64,
    stats: &mut RunningStats,
    theta: f64,
    training: bool,
) -> Result<Var> {
    if theta <= 0.0 {
        return tdbn(g, x, lambda, beta, cfg, u_th, stats, training);
    }
    if !training {
        if theta >= 1.0 {
            return tdln(g, x, lambda, beta, cfg, u_th);
        }
        let ln = tdln(g, x, lambda, beta, cfg, u_th)?;
        let bn = tdbn(g, x, lambda, beta, cfg, u_th, stats, false)?;
        let a = g.scale(ln, theta);
        let b = g.scale(bn, 1.0 - theta);
        return g.add(a, b);
    }
    if theta >= 1.0 {
        let period = period_checked(g, x, cfg, stats)?;
        let m = moments(g.value(x).data(), Groups::Columns(period));
        stats.update(&m.mean, &m.var, cfg.momentum);
        return tdln(g, x, lambda, beta, cfg, u_th);
    }
    let d = channels(g, x)?;
    let parts = [(Groups::Rows(d), theta), (Groups::Columns(period_checked(g, x, cfg, stats)?), 1.0 - theta)];
    let (y, m) = normalize(g, x, lambda, beta, &parts, cfg.alpha * u_th, cfg.epsilon)?;
    stats.update(&m[1].mean, &m[1].var, cfg.momentum);
    Ok(y)
}

/// Plain-value normalization parameters (the graph functions take the
/// learnable `lambda`/`beta` as graph leaves instead).
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub lambda: Tensor,
    pub beta: Tensor,
    pub u_th: f64,
    pub config: NormConfig,
    pub stats: RunningStats,
}

impl NormParams {
    /// Identity affine (`lambda = 1`, `beta = 0`) with fresh running statistics.
    pub fn new(channels: usize, u_th: f64, config: NormConfig) -> Self {
        Self {
            lambda: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            u_th,
            config,
            stats: RunningStats::new(channels),
        }
    }

    /// Per-channel `(scale, shift)` that inference-time tdBN applies:
    /// `out = x * scale + shift`.
    pub fn folded_affine(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.config.pooling != StatPooling::Pooled {
            return Err(Error::contract(
                "per-timestep statistics differ across SNN time and cannot fold into a shared linear layer",
            ));
        }
        let (s, h) = inference_affine(&self.stats, &self.config, self.u_th);
        let scale: Vec<f64> = s.iter().zip(self.lambda.data()).map(|(s, l)| s * l).collect();
        let shift = h
            .iter()
            .zip(self.lambda.data())
            .zip(self.beta.data())
            .map(|((h, l), b)| h * l + b)
            .collect();
        Ok((scale, shift))
    }
}

fn check_layout(x: &Tensor) -> Result<()> {
    if x.ndim() != 4 {
        return Err(Error::contract(format!(
            "expected a [B, N, T, D] tensor, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn run<F>(x: &Tensor, p: &NormParams, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var, Var, Var) -> Result<Var>,
{
    check_layout(x)?;
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let l = g.constant(p.lambda.clone());
    let b = g.constant(p.beta.clone());
    let y = f(&mut g, xv, l, b)?;
    Ok(g.value(y).clone())
}

pub fn tdln_forward(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    p.config.validate()?;
    run(x, p, |g, x, l, b| tdln(g, x, l, b, &p.config, p.u_th))
}

pub fn tdbn_forward(x: &Tensor, p: &mut NormParams, training: bool) -> Result<Tensor> {
    p.config.validate()?;
    let (cfg, u_th) = (p.config, p.u_th);
    let mut stats = p.stats.clone();
    let out = run(x, p, |g, x, l, b| tdbn(g, x, l, b, &cfg, u_th, &mut stats, training))?;
    p.stats = stats;
    Ok(out)
}

pub fn ptbn_forward(x: &Tensor, p: &mut NormParams, s: &PtbnState, training: bool) -> Result<Tensor> {
    p.config.validate()?;
    let (cfg, u_th) = (p.config, p.u_th);
    let mut stats = p.stats.clone();
    let out = run(x, p, |g, x, l, b| {
        ptbn(g, x, l, b, &cfg, u_th, &mut stats, s.theta, training)
    })?;
    p.stats = stats;
    Ok(out)
}

/// Fold inference-time tdBN into the linear layer `x·w + b` that feeds it.
///
/// Returns `(w', b')` with `x·w' + b' == tdBN(x·w + b)` for every `x`.
pub fn fold_into_linear(w: &Tensor, b: &Tensor, p: &NormParams, state: &PtbnState) -> Result<(Tensor, Tensor)> {
    if state.theta > 0.0 {
        return Err(Error::contract(format!(
            "cannot fold while theta = {} > 0: tdLN statistics depend on the input",
            state.theta
        )));
    }
    if w.ndim() != 2 || b.ndim() != 1 || w.shape()[1] != b.len() || b.len() != p.lambda.len() {
        return Err(Error::dim(format!(
            "fold: weight {:?}, bias {:?}, norm over {} channels",
            w.shape(),
            b.shape(),
            p.lambda.len()
        )));
    }
    let (scale, shift) = p.folded_affine()?;
    let d_out = b.len();
    let w2 = Tensor::from_fn(w.shape().to_vec(), |i| w.data()[i] * scale[i % d_out]);
    let b2 = Tensor::from_fn([d_out], |j| b.data()[j] * scale[j] + shift[j]);
    Ok((w2, b2))
}
