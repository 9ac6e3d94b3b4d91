//! Causal self-attention: the real-valued softmax reference (VLA) and the three
//! spike-driven variants SSSA, TSSA and PSSA.
//!
//! All inputs use the layout `[B, N, T, D]`. Heads split the channel axis into
//! `n_heads` contiguous groups of `d_k = D / n_heads` channels.
//!
//! - VLA: `softmax(Q Kᵀ / sqrt(d_k) + causal mask) V` per `(b, t, head)`.
//! - SSSA: `scale · mask(Q Kᵀ) V` per `(b, t, head)`.
//! - TSSA: the `T` timesteps are concatenated along channels, so one causal
//!   `N × N` map of co-activation counts is shared by all timesteps of a head.
//! - PSSA: `scale · Q_i ⊙ Σ_j P_ij (K_j ⊙ V_j)` over `0 <= i - j < S`,
//!   element-wise on the `T·D` concatenated channels.

mod bench;
mod entropy;
mod kernels;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use bench::{bench_attention, fit_exponent, fit_rows, to_csv, BenchFit, BenchRow};
pub use entropy::{plugin_entropy, temporal_entropy, EntropyReport};
pub use kernels::{NoCount, OpCount, Ops};

use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};
use kernels::window_start;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Vla,
    Sssa,
    Tssa,
    #[default]
    Pssa,
}

impl AttnMode {
    pub const ALL: [AttnMode; 4] = [AttnMode::Vla, AttnMode::Sssa, AttnMode::Tssa, AttnMode::Pssa];

    pub fn is_spiking(self) -> bool {
        self != AttnMode::Vla
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttnMode::Vla => "vla",
            AttnMode::Sssa => "sssa",
            AttnMode::Tssa => "tssa",
            AttnMode::Pssa => "pssa",
        }
    }
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttnMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Validation(format!("unknown attention mode {s:?} (expected vla, sssa, tssa or pssa)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub snn_timesteps: usize,
    pub mode: AttnMode,
    pub window: usize,
    pub attn_scale: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 1,
            context_len: 20,
            snn_timesteps: 4,
            mode: AttnMode::Pssa,
            window: 8,
            attn_scale: 0.125,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len == 0 || self.snn_timesteps == 0 {
            return Err(Error::Validation("context_len and snn_timesteps must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::contract("PSSA window S must be at least 1"));
        }
        if self.window > self.context_len {
            return Err(Error::Validation(format!(
                "window {} exceeds context_len {}",
                self.window, self.context_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Learnable pair-wise positional bias of PSSA.
///
/// Only entries with `0 <= i - j < S` are ever read; the rest stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalBias {
    pub p: Tensor,
}

impl PositionalBias {
    pub fn zeros(n: usize) -> Self {
        Self { p: Tensor::zeros([n, n]) }
    }

    /// Uniform in `[-0.02, 0.02]` inside the causal window.
    pub fn init(n: usize, window: usize, rng: &mut impl Rng) -> Self {
        let mut p = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in window_start(i, window)..=i {
                p.data_mut()[i * n + j] = rng.random_range(-0.02..=0.02);
            }
        }
        Self { p }
    }

    /// Copy with every entry outside the causal window zeroed.
    pub fn masked(&self, window: usize) -> Tensor {
        let n = self.p.shape()[0];
        let mut p = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in window_start(i, window)..=i {
                p.data_mut()[i * n + j] = self.p.data()[i * n + j];
            }
        }
        p
    }

    /// Number of trainable entries: `Σ_i min(S, i + 1)`.
    pub fn effective_len(n: usize, window: usize) -> usize {
        (0..n).map(|i| window.min(i + 1)).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    n: usize,
    t: usize,
    d: usize,
    h: usize,
}

impl Dims {
    fn dk(&self) -> usize {
        self.d / self.h
    }

    fn len(&self) -> usize {
        self.b * self.n * self.t * self.d
    }
}

#[derive(Clone, Copy, Debug)]
enum Grouping {
    /// one group per `(b, t, head)` with `d_k` channels
    PerTimestep,
    /// one group per `(b, head)` with `T · d_k` channels
    Concatenated,
}

impl Grouping {
    fn for_mode(mode: AttnMode) -> Self {
        if mode == AttnMode::Tssa {
            Grouping::Concatenated
        } else {
            Grouping::PerTimestep
        }
    }

    fn groups(self, d: &Dims) -> usize {
        match self {
            Grouping::PerTimestep => d.b * d.t * d.h,
            Grouping::Concatenated => d.b * d.h,
        }
    }

    fn width(self, d: &Dims) -> usize {
        match self {
            Grouping::PerTimestep => d.dk(),
            Grouping::Concatenated => d.t * d.dk(),
        }
    }

    /// Flat offsets of the `[N, width]` buffer of group `grp`.
    fn indices(self, d: &Dims, grp: usize) -> Vec<usize> {
        let dk = d.dk();
        let mut idx = Vec::with_capacity(d.n * self.width(d));
        for i in 0..d.n {
            match self {
                Grouping::PerTimestep => {
                    let (b, t, h) = (grp / (d.t * d.h), (grp / d.h) % d.t, grp % d.h);
                    let base = ((b * d.n + i) * d.t + t) * d.d + h * dk;
                    idx.extend(base..base + dk);
                }
                Grouping::Concatenated => {
                    let (b, h) = (grp / d.h, grp % d.h);
                    for t in 0..d.t {
                        let base = ((b * d.n + i) * d.t + t) * d.d + h * dk;
                        idx.extend(base..base + dk);
                    }
                }
            }
        }
        idx
    }
}

fn gather(src: &[f64], idx: &[usize], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(idx.iter().map(|&i| src[i]));
}

fn dims_of(shapes: [&[usize]; 3], cfg: &AttnConfig) -> Result<Dims> {
    let s = shapes[0];
    if shapes.iter().any(|x| *x != s) {
        return Err(Error::dim(format!(
            "Q, K, V shapes differ: {:?}, {:?}, {:?}",
            shapes[0], shapes[1], shapes[2]
        )));
    }
    if s.len() != 4 {
        return Err(Error::dim(format!("attention expects [B, N, T, D], got {s:?}")));
    }
    if s[3] != cfg.d_model {
        return Err(Error::dim(format!("channel axis {} != d_model {}", s[3], cfg.d_model)));
    }
    if s[1] > cfg.context_len {
        return Err(Error::dim(format!("{} tokens exceed context_len {}", s[1], cfg.context_len)));
    }
    Ok(Dims {
        b: s[0],
        n: s[1],
        t: s[2],
        d: s[3],
        h: cfg.n_heads,
    })
}

fn check_binary(mode: AttnMode, ts: [&Tensor; 3]) -> Result<()> {
    for (name, t) in ["Q", "K", "V"].iter().zip(ts) {
        if !t.is_binary() {
            return Err(Error::contract(format!("{mode} needs binary spike inputs; {name} has non-binary values")));
        }
    }
    Ok(())
}

fn forward_raw<O: Ops>(mode: AttnMode, q: &[f64], k: &[f64], v: &[f64], p: Option<&Tensor>, d: &Dims, cfg: &AttnConfig, ops: &mut O) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    match mode {
        AttnMode::Pssa => {
            let p = p.expect("PSSA bias checked by caller");
            let stride = p.shape()[0];
            let block = d.n * d.t * d.d;
            for b in 0..d.b {
                let r = b * block..(b + 1) * block;
                kernels::pssa_forward(
                    &q[r.clone()],
                    &k[r.clone()],
                    &v[r.clone()],
                    p.data(),
                    stride,
                    d.n,
                    d.t * d.d,
                    cfg.window,
                    cfg.attn_scale,
                    &mut out[r],
                    ops,
                );
            }
        }
        _ => {
            let grouping = Grouping::for_mode(mode);
            let c = grouping.width(d);
            let (mut qb, mut kb, mut vb) = (Vec::new(), Vec::new(), Vec::new());
            let mut ob = vec![0.0; d.n * c];
            for grp in 0..grouping.groups(d) {
                let idx = grouping.indices(d, grp);
                gather(q, &idx, &mut qb);
                gather(k, &idx, &mut kb);
                gather(v, &idx, &mut vb);
                if mode == AttnMode::Vla {
                    kernels::softmax_forward(&qb, &kb, &vb, d.n, c, true, &mut ob, ops);
                } else {
                    kernels::linear_forward(&qb, &kb, &vb, d.n, c, cfg.attn_scale, &mut ob, ops);
                }
                for (&i, &o) in idx.iter().zip(&ob) {
                    out[i] = o;
                }
            }
        }
    }
    out
}

struct AttnFn {
    mode: AttnMode,
    dims: Dims,
    cfg: AttnConfig,
}

impl Function for AttnFn {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let d = &self.dims;
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let g = grad.data();
        let mut dq = vec![0.0; d.len()];
        let mut dk = vec![0.0; d.len()];
        let mut dv = vec![0.0; d.len()];
        let shape = inputs[0].shape().to_vec();
        if self.mode == AttnMode::Pssa {
            let p = inputs[3];
            let stride = p.shape()[0];
            let mut dp = vec![0.0; p.len()];
            let block = d.n * d.t * d.d;
            for b in 0..d.b {
                let r = b * block..(b + 1) * block;
                kernels::pssa_backward(
                    &q[r.clone()],
                    &k[r.clone()],
                    &v[r.clone()],
                    p.data(),
                    stride,
                    &g[r.clone()],
                    d.n,
                    d.t * d.d,
                    self.cfg.window,
                    self.cfg.attn_scale,
                    &mut dq[r.clone()],
                    &mut dk[r.clone()],
                    &mut dv[r.clone()],
                    &mut dp,
                );
            }
            return vec![
                Some(Tensor::new(shape.clone(), dq).expect("shape")),
                Some(Tensor::new(shape.clone(), dk).expect("shape")),
                Some(Tensor::new(shape, dv).expect("shape")),
                Some(Tensor::new(p.shape().to_vec(), dp).expect("shape")),
            ];
        }
        let grouping = Grouping::for_mode(self.mode);
        let c = grouping.width(d);
        let (mut qb, mut kb, mut vb, mut gb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for grp in 0..grouping.groups(d) {
            let idx = grouping.indices(d, grp);
            gather(q, &idx, &mut qb);
            gather(k, &idx, &mut kb);
            gather(v, &idx, &mut vb);
            gather(g, &idx, &mut gb);
            let (mut gq, mut gk, mut gv) = (vec![0.0; d.n * c], vec![0.0; d.n * c], vec![0.0; d.n * c]);
            if self.mode == AttnMode::Vla {
                kernels::softmax_backward(&qb, &kb, &vb, &gb, d.n, c, true, &mut gq, &mut gk, &mut gv);
            } else {
                kernels::linear_backward(&qb, &kb, &vb, &gb, d.n, c, self.cfg.attn_scale, &mut gq, &mut gk, &mut gv);
            }
            for (x, &i) in idx.iter().enumerate() {
                dq[i] += gq[x];
                dk[i] += gk[x];
                dv[i] += gv[x];
            }
        }
        vec![
            Some(Tensor::new(shape.clone(), dq).expect("shape")),
            Some(Tensor::new(shape.clone(), dk).expect("shape")),
            Some(Tensor::new(shape, dv).expect("shape")),
        ]
    }
}

/// Causal attention of `cfg.mode` on the graph.
///
/// `bias` is the `[context_len, context_len]` PSSA bias and is ignored by the
/// other modes. With `require_spikes`, spiking modes reject non-binary inputs.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    cfg: &AttnConfig,
    require_spikes: bool,
) -> Result<Var> {
    cfg.validate()?;
    let d = dims_of([g.shape(q), g.shape(k), g.shape(v)], cfg)?;
    let mode = cfg.mode;
    if require_spikes && mode.is_spiking() {
        check_binary(mode, [g.value(q), g.value(k), g.value(v)])?;
    }
    let bias = match (mode, bias) {
        (AttnMode::Pssa, Some(p)) => {
            if g.shape(p) != [cfg.context_len, cfg.context_len] {
                return Err(Error::dim(format!(
                    "positional bias {:?} != [{n}, {n}]",
                    g.shape(p),
                    n = cfg.context_len
                )));
            }
            Some(p)
        }
        (AttnMode::Pssa, None) => return Err(Error::contract("PSSA needs a positional bias")),
        _ => None,
    };
    let out = forward_raw(
        mode,
        g.value(q).data(),
        g.value(k).data(),
        g.value(v).data(),
        bias.map(|p| g.value(p)),
        &d,
        cfg,
        &mut NoCount,
    );
    let out = Tensor::new(g.shape(q).to_vec(), out)?;
    let f = AttnFn { mode, dims: d, cfg: *cfg };
    Ok(match bias {
        Some(p) => g.apply(&[q, k, v, p], out, f),
        None => g.apply(&[q, k, v], out, f),
    })
}

/// Run attention on plain tensors, reporting every executed add and multiply.
pub fn instrumented(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, cfg: &AttnConfig) -> Result<(Tensor, OpCount)> {
    cfg.validate()?;
    let d = dims_of([q.shape(), k.shape(), v.shape()], cfg)?;
    if cfg.mode == AttnMode::Pssa {
        match bias {
            Some(p) if p.shape() == [cfg.context_len, cfg.context_len] => {}
            _ => return Err(Error::contract("PSSA needs a [context_len, context_len] positional bias")),
        }
    }
    let mut count = OpCount::default();
    let out = forward_raw(cfg.mode, q.data(), k.data(), v.data(), bias, &d, cfg, &mut count);
    Ok((Tensor::new(q.shape().to_vec(), out)?, count))
}

fn run_plain(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, cfg: &AttnConfig) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let pv = bias.map(|p| g.constant(p.clone()));
    let out = attention(&mut g, qv, kv, vv, pv, cfg, true)?;
    Ok(g.value(out).clone())
}

/// Softmax attention; `causal = false` drops the mask.
pub fn vla_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig, causal: bool) -> Result<Tensor> {
    let cfg = AttnConfig { mode: AttnMode::Vla, ..*cfg };
    if causal {
        return run_plain(q, k, v, None, &cfg);
    }
    cfg.validate()?;
    let d = dims_of([q.shape(), k.shape(), v.shape()], &cfg)?;
    let grouping = Grouping::PerTimestep;
    let c = grouping.width(&d);
    let mut out = vec![0.0; d.len()];
    let (mut qb, mut kb, mut vb) = (Vec::new(), Vec::new(), Vec::new());
    let mut ob = vec![0.0; d.n * c];
    for grp in 0..grouping.groups(&d) {
        let idx = grouping.indices(&d, grp);
        gather(q.data(), &idx, &mut qb);
        gather(k.data(), &idx, &mut kb);
        gather(v.data(), &idx, &mut vb);
        kernels::softmax_forward(&qb, &kb, &vb, d.n, c, false, &mut ob, &mut NoCount);
        for (&i, &o) in idx.iter().zip(&ob) {
            out[i] = o;
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}

pub fn sssa_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig) -> Result<Tensor> {
    run_plain(q, k, v, None, &AttnConfig { mode: AttnMode::Sssa, ..*cfg })
}

pub fn tssa_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnConfig) -> Result<Tensor> {
    run_plain(q, k, v, None, &AttnConfig { mode: AttnMode::Tssa, ..*cfg })
}

pub fn pssa_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: &PositionalBias, cfg: &AttnConfig) -> Result<Tensor> {
    run_plain(q, k, v, Some(&bias.p), &AttnConfig { mode: AttnMode::Pssa, ..*cfg })
}

/// TSSA co-activation counts `A`, shaped `[B, n_heads, N, N]`.
pub fn coactivation_counts(q: &Tensor, k: &Tensor, cfg: &AttnConfig) -> Result<Tensor> {
    cfg.validate()?;
    let d = dims_of([q.shape(), k.shape(), k.shape()], cfg)?;
    let grouping = Grouping::Concatenated;
    let c = grouping.width(&d);
    let (mut qb, mut kb) = (Vec::new(), Vec::new());
    let mut out = Vec::with_capacity(d.b * d.h * d.n * d.n);
    for grp in 0..grouping.groups(&d) {
        let idx = grouping.indices(&d, grp);
        gather(q.data(), &idx, &mut qb);
        gather(k.data(), &idx, &mut kb);
        out.extend(kernels::coactivation(&qb, &kb, d.n, c));
    }
    Tensor::new([d.b, d.h, d.n, d.n], out)
}

/// Closed-form add and multiply counts of one attention call on a batch of
/// `batch` full-length windows.
///
/// With `P = N(N+1)/2` causal pairs and `W = Σ_i min(S, i+1)` windowed pairs:
///
/// - SSSA and TSSA: `2·P·D + N·D` multiplies and `2·P·D` adds per `(b, t)`
/// - PSSA: `(3N + W)` multiplies and `W` adds per `(b, channel)` with `T·D` channels
/// - VLA: `2·P·D + 2·P·H` multiplies and `2·P·D + 2·P·H` adds per `(b, t)`
pub fn count_attention_ops(cfg: &AttnConfig, batch: usize) -> OpCount {
    let (n, t, d, h) = (cfg.context_len as u64, cfg.snn_timesteps as u64, cfg.d_model as u64, cfg.n_heads as u64);
    let b = batch as u64;
    let pairs = n * (n + 1) / 2;
    match cfg.mode {
        AttnMode::Sssa | AttnMode::Tssa => OpCount {
            muls: b * t * (2 * pairs * d + n * d),
            adds: b * t * 2 * pairs * d,
        },
        AttnMode::Pssa => {
            let w = PositionalBias::effective_len(cfg.context_len, cfg.window) as u64;
            let c = b * t * d;
            OpCount {
                muls: c * (3 * n + w),
                adds: c * w,
            }
        }
        AttnMode::Vla => {
            let per = 2 * pairs * d + 2 * pairs * h;
            OpCount {
                muls: b * t * per,
                adds: b * t * per,
            }
        }
    }
}
