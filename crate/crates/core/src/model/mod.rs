//! DSFormer and the softmax-attention reference model.
//!
//! A token is the concatenation `[prev_action; return_to_go; state]`. The
//! spiking model embeds tokens to `D` channels, repeats them over `T` SNN
//! timesteps and runs `M` decoder blocks on the `[B, N, T, D]` membrane stream:
//!
//! ```text
//! s   = SN(PTBN(X))
//! Q   = SN(PTBN(s Wq)),  K = SN(PTBN(s Wk)),  V = SN(PTBN(s Wv))
//! Y   = X + PTBN(SN(PTBN(Attn(Q, K, V))) Wo)
//! Z   = Y + PTBN(SN(PTBN(SN(PTBN(Y)) W1)) W2)
//! ```
//!
//! The residual stream carries real membrane potentials while every operand
//! of a linear layer inside a block is a spike tensor. The stream is averaged
//! over `T` and mapped to actions by a linear head (`tanh` for continuous
//! actions, raw logits for discrete ones).
//!
//! The reference model is a pre-LayerNorm causal transformer with softmax
//! attention and a GELU MLP, evaluated at `T = 1`.

mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{Bound, ParamStore};

use crate::attention::{self, AttnConfig, AttnMode, PositionalBias};
use crate::error::{Error, Result};
use crate::neuron::{lif, LifParams, SpikeMode};
use crate::norm::{self, NormConfig, NormParams, PtbnState, RunningStats};
use crate::tensor::{Checkpoint, Graph, ReduceOp, Tensor, Var, FLAG_FOLDED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpace {
    #[default]
    Discrete,
    Continuous,
}

/// How the `T` axis is collapsed before the prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Mean,
    /// LayerNorm over channels at every timestep, then the mean over `T`.
    NormMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub snn_timesteps: usize,
    pub n_heads: usize,
    pub attn_mode: AttnMode,
    pub window: usize,
    pub mlp_ratio: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_space: ActionSpace,
    pub max_episode_len: usize,
    pub attn_scale: f64,
    pub readout: Readout,
    pub lif: LifParams,
    pub norm: NormConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            d_model: 128,
            context_len: 20,
            snn_timesteps: 4,
            n_heads: 1,
            attn_mode: AttnMode::Pssa,
            window: 8,
            mlp_ratio: 4,
            state_dim: 7,
            action_dim: 5,
            action_space: ActionSpace::Discrete,
            max_episode_len: 200,
            attn_scale: 0.125,
            readout: Readout::Mean,
            lif: LifParams::default(),
            norm: NormConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.snn_timesteps == 0 || self.context_len == 0 {
            return Err(Error::Validation(
                "n_blocks, snn_timesteps and context_len must be at least 1".into(),
            ));
        }
        if self.mlp_ratio == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Validation("mlp_ratio, state_dim and action_dim must be at least 1".into()));
        }
        self.attn_config().validate()?;
        self.lif.validate()?;
        self.norm.validate()?;
        Ok(())
    }

    /// Width of one input token.
    pub fn token_dim(&self) -> usize {
        self.action_dim + 1 + self.state_dim
    }

    pub fn is_spiking(&self) -> bool {
        self.attn_mode.is_spiking()
    }

    /// SNN timesteps actually unrolled (the reference model runs at `T = 1`).
    pub fn timesteps(&self) -> usize {
        if self.is_spiking() {
            self.snn_timesteps
        } else {
            1
        }
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            context_len: self.context_len,
            snn_timesteps: self.timesteps(),
            mode: self.attn_mode,
            window: self.window,
            attn_scale: self.attn_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpikeCount {
    pub ones: u64,
    pub total: u64,
}

impl SpikeCount {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ones as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
    pub non_finite: usize,
}

impl ActivationStat {
    fn of(name: &str, t: &Tensor) -> Self {
        let finite: Vec<f64> = t.data().iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len().max(1) as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            name: name.to_string(),
            mean,
            std: var.sqrt(),
            max_abs: finite.iter().fold(0.0, |m, v| m.max(v.abs())),
            non_finite: t.len() - finite.len(),
        }
    }
}

/// Per-call forward options and optional recordings.
#[derive(Clone, Debug, Default)]
pub struct ForwardCtx {
    pub training: bool,
    pub spike_mode: SpikeMode,
    pub record_rates: bool,
    /// Spike counts per neuron layer, plus `blk{i}/kv` for `K ⊙ V` co-activation.
    pub rates: BTreeMap<String, SpikeCount>,
    /// Neuron outputs outside `{0, 1}` seen while recording rates.
    pub non_binary: u64,
    pub record_stats: bool,
    pub stats: Vec<ActivationStat>,
}

impl ForwardCtx {
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    pub fn inference() -> Self {
        Self::default()
    }

    fn observe(&mut self, name: &str, t: &Tensor) {
        if self.record_stats {
            self.stats.push(ActivationStat::of(name, t));
        }
    }

    fn count(&mut self, name: &str, ones: u64, total: u64) {
        if self.record_rates {
            let c = self.rates.entry(name.to_string()).or_default();
            c.ones += ones;
            c.total += total;
        }
    }
}

/// What feeds a linear layer, for operation accounting.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearInput {
    Real,
    /// Output of the named spiking layer.
    Spikes(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSite {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Rows the layer is applied to per sample.
    pub positions: usize,
    pub input: LinearInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnSite {
    pub block: usize,
    pub q: String,
    pub k: String,
    pub v: String,
    pub kv: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub linears: Vec<LinearSite>,
    pub attention: Vec<AttnSite>,
}

/// Linear layers whose PTBN folds into them.
const FOLDABLE: [(&str, &str); 6] = [
    ("q", "q_norm"),
    ("k", "k_norm"),
    ("v", "v_norm"),
    ("o", "o_norm"),
    ("fc1", "fc1_norm"),
    ("fc2", "fc2_norm"),
];

/// PTBN layers with no linear layer in front; they become fixed affines.
const STANDALONE: [&str; 3] = ["norm_in", "attn_norm", "mlp_norm"];

fn blk(i: usize, s: &str) -> String {
    format!("blk{i}/{s}")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    theta: f64,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Running tdBN statistics per PTBN layer (empty once folded).
    pub stats: BTreeMap<String, RunningStats>,
    /// Current PTBN blend weight.
    pub theta: f64,
    folded: bool,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model {
            config,
            params: ParamStore::new(),
            stats: BTreeMap::new(),
            theta: 1.0,
            folded: false,
        };
        let c = m.config.clone();
        let (d, f) = (c.d_model, c.token_dim());
        let hidden = c.mlp_ratio * d;
        m.init_linear("embed", f, d, &mut rng);
        m.params.insert("pos", Tensor::uniform([c.context_len, d], -0.02, 0.02, &mut rng));
        for i in 0..c.n_blocks {
            if c.is_spiking() {
                m.init_norm(&blk(i, "norm_in"), d);
                for (lin, nrm) in &FOLDABLE[..3] {
                    m.init_linear(&blk(i, lin), d, d, &mut rng);
                    m.init_norm(&blk(i, nrm), d);
                }
                if c.attn_mode == AttnMode::Pssa {
                    let p = PositionalBias::init(c.context_len, c.window, &mut rng);
                    m.params.insert(blk(i, "pos_bias"), p.p);
                }
                m.init_norm(&blk(i, "attn_norm"), d);
                m.init_linear(&blk(i, "o"), d, d, &mut rng);
                m.init_norm(&blk(i, "o_norm"), d);
                m.init_norm(&blk(i, "mlp_norm"), d);
                m.init_linear(&blk(i, "fc1"), d, hidden, &mut rng);
                m.init_norm(&blk(i, "fc1_norm"), hidden);
                m.init_linear(&blk(i, "fc2"), hidden, d, &mut rng);
                m.init_norm(&blk(i, "fc2_norm"), d);
            } else {
                m.init_layer_norm(&blk(i, "ln1"), d);
                for lin in ["q", "k", "v", "o"] {
                    m.init_linear(&blk(i, lin), d, d, &mut rng);
                }
                m.init_layer_norm(&blk(i, "ln2"), d);
                m.init_linear(&blk(i, "fc1"), d, hidden, &mut rng);
                m.init_linear(&blk(i, "fc2"), hidden, d, &mut rng);
            }
        }
        if !c.is_spiking() {
            m.init_layer_norm("ln_f", d);
        }
        if c.readout == Readout::NormMean {
            m.init_layer_norm("readout_norm", d);
        }
        m.init_linear("head", d, c.action_dim, &mut rng);
        Ok(m)
    }

    fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let a = 1.0 / (fan_in as f64).sqrt();
        self.params.insert(format!("{name}/w"), Tensor::uniform([fan_in, fan_out], -a, a, rng));
        self.params.insert(format!("{name}/b"), Tensor::zeros([fan_out]));
    }

    fn init_norm(&mut self, name: &str, d: usize) {
        self.params.insert(format!("{name}/lambda"), Tensor::ones([d]));
        self.params.insert(format!("{name}/beta"), Tensor::zeros([d]));
        let len = match self.config.norm.pooling {
            norm::StatPooling::Pooled => d,
            norm::StatPooling::PerTimestep => self.config.timesteps() * d,
        };
        self.stats.insert(name.to_string(), RunningStats::new(len));
    }

    fn init_layer_norm(&mut self, name: &str, d: usize) {
        self.params.insert(format!("{name}/gamma"), Tensor::ones([d]));
        self.params.insert(format!("{name}/beta"), Tensor::zeros([d]));
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn ptbn_state(&self) -> PtbnState {
        PtbnState {
            theta: self.theta,
            t_p: 1,
            t_cur: 0,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound::new(g, &self.params)
    }

    /// Per-token action outputs `[B, N, action_dim]` for tokens `[B, N, token_dim]`.
    pub fn forward(&mut self, g: &mut Graph, p: &Bound, tokens: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if ctx.training && self.folded {
            return Err(Error::contract("a folded model cannot be trained"));
        }
        let mut r = Runner {
            cfg: &self.config,
            stats: &mut self.stats,
            theta: self.theta,
            folded: self.folded,
            p,
            g,
            ctx,
        };
        r.forward(tokens)
    }

    /// Inference-mode forward on plain tensors.
    pub fn predict(&mut self, tokens: &Tensor) -> Result<Tensor> {
        self.predict_with(tokens, &mut ForwardCtx::inference())
    }

    pub fn predict_with(&mut self, tokens: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let x = g.constant(tokens.clone());
        let y = self.forward(&mut g, &p, x, ctx)?;
        Ok(g.value(y).clone())
    }

    /// Merge every PTBN layer into its inference form: folded into the
    /// preceding linear layer where there is one, a fixed per-channel affine
    /// otherwise. Requires `theta = 0`.
    pub fn fold(&mut self) -> Result<()> {
        if self.folded {
            return Ok(());
        }
        if !self.config.is_spiking() {
            self.folded = true;
            return Ok(());
        }
        if self.theta > 0.0 {
            return Err(Error::contract(format!(
                "cannot fold while theta = {} > 0: tdLN statistics depend on the input",
                self.theta
            )));
        }
        let mut params = self.params.clone();
        let state = self.ptbn_state();
        for i in 0..self.config.n_blocks {
            for (lin, nrm) in FOLDABLE {
                let np = self.norm_params(&blk(i, nrm))?;
                let (wn, bn) = (format!("{}/w", blk(i, lin)), format!("{}/b", blk(i, lin)));
                let (w, b) = norm::fold_into_linear(params.require(&wn)?, params.require(&bn)?, &np, &state)?;
                params.insert(wn, w);
                params.insert(bn, b);
                params.remove(&format!("{}/lambda", blk(i, nrm)));
                params.remove(&format!("{}/beta", blk(i, nrm)));
            }
            for nrm in STANDALONE {
                let name = blk(i, nrm);
                let (scale, shift) = self.norm_params(&name)?.folded_affine()?;
                let d = scale.len();
                let li = format!("{name}/lambda");
                let pos = params.iter().position(|(n, _)| n == li).expect("lambda present");
                // keep the affine where the norm parameters were
                let mut rebuilt = ParamStore::new();
                for (k, (n, t)) in params.iter().enumerate() {
                    if k == pos {
                        rebuilt.insert(format!("{name}/scale"), Tensor::new([d], scale.clone())?);
                        rebuilt.insert(format!("{name}/shift"), Tensor::new([d], shift.clone())?);
                    }
                    if n != li && n != format!("{name}/beta") {
                        rebuilt.insert(n, t.clone());
                    }
                }
                params = rebuilt;
            }
        }
        self.params = params;
        self.stats.clear();
        self.folded = true;
        Ok(())
    }

    fn norm_params(&self, name: &str) -> Result<NormParams> {
        let stats = self
            .stats
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("no running statistics for {name}")))?;
        Ok(NormParams {
            lambda: self.params.require(&format!("{name}/lambda"))?.clone(),
            beta: self.params.require(&format!("{name}/beta"))?.clone(),
            u_th: self.config.lif.u_th,
            config: self.config.norm,
            stats,
        })
    }

    /// Number of scalar parameters. PSSA biases count only their in-window entries.
    pub fn parameter_count(&self) -> usize {
        let window = PositionalBias::effective_len(self.config.context_len, self.config.window);
        self.params
            .iter()
            .map(|(n, t)| if n.ends_with("/pos_bias") { window } else { t.len() })
            .sum()
    }

    /// Parameter count of the deployed model, after folding.
    pub fn inference_parameter_count(&self) -> Result<usize> {
        if self.folded || !self.config.is_spiking() {
            return Ok(self.parameter_count());
        }
        let mut m = self.clone();
        m.theta = 0.0;
        m.fold()?;
        Ok(m.parameter_count())
    }

    /// Linear layers and attention cores with the spike layers that feed them.
    pub fn layer_plan(&self) -> LayerPlan {
        let c = &self.config;
        let (n, t, d) = (c.context_len, c.timesteps(), c.d_model);
        let hidden = c.mlp_ratio * d;
        let site = |name: String, fan_in, fan_out, positions, input| LinearSite {
            name,
            fan_in,
            fan_out,
            positions,
            input,
        };
        let mut linears = vec![site("embed".into(), c.token_dim(), d, n, LinearInput::Real)];
        let mut attention = Vec::new();
        for i in 0..c.n_blocks {
            let input = |s: &str| {
                if c.is_spiking() {
                    LinearInput::Spikes(blk(i, s))
                } else {
                    LinearInput::Real
                }
            };
            for lin in ["q", "k", "v"] {
                linears.push(site(blk(i, lin), d, d, n * t, input("sn_in")));
            }
            linears.push(site(blk(i, "o"), d, d, n * t, input("attn_sn")));
            linears.push(site(blk(i, "fc1"), d, hidden, n * t, input("mlp_sn")));
            linears.push(site(blk(i, "fc2"), hidden, d, n * t, input("fc1_sn")));
            if c.is_spiking() {
                attention.push(AttnSite {
                    block: i,
                    q: blk(i, "q_sn"),
                    k: blk(i, "k_sn"),
                    v: blk(i, "v_sn"),
                    kv: blk(i, "kv"),
                });
            }
        }
        linears.push(site("head".into(), d, c.action_dim, n, LinearInput::Real));
        LayerPlan { linears, attention }
    }

    /// Serialize weights, running statistics, config and `extra` metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&ModelMeta {
            model: self.config.clone(),
            theta: self.theta,
            extra,
        })?;
        let mut ck = Checkpoint::new(meta, if self.folded { FLAG_FOLDED } else { 0 });
        for (n, t) in self.params.iter() {
            ck.insert(format!("param/{n}"), t.clone())?;
        }
        for (n, s) in &self.stats {
            ck.insert(format!("stats/{n}/mean"), Tensor::new([s.mean.len()], s.mean.clone())?)?;
            ck.insert(format!("stats/{n}/var"), Tensor::new([s.var.len()], s.var.clone())?)?;
        }
        Ok(ck)
    }

    /// Rebuild a model and return the `extra` metadata stored with it.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, serde_json::Value)> {
        let meta: ModelMeta = serde_json::from_str(&ck.meta)?;
        meta.model.validate()?;
        let mut params = ParamStore::new();
        let mut stats: BTreeMap<String, RunningStats> = BTreeMap::new();
        for (name, t) in ck.entries() {
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix("stats/") {
                if let Some(layer) = n.strip_suffix("/mean") {
                    stats.entry(layer.to_string()).or_insert_with(|| RunningStats::new(0)).mean = t.data().to_vec();
                } else if let Some(layer) = n.strip_suffix("/var") {
                    stats.entry(layer.to_string()).or_insert_with(|| RunningStats::new(0)).var = t.data().to_vec();
                }
            }
        }
        let fresh = Model::new(meta.model.clone(), 0)?;
        let model = Model {
            config: meta.model,
            params,
            stats,
            theta: meta.theta,
            folded: ck.is_folded(),
        };
        if !model.folded {
            for (n, t) in fresh.params.iter() {
                let got = model.params.require(n)?;
                if got.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter {n} has shape {:?}, config expects {:?}",
                        got.shape(),
                        t.shape()
                    )));
                }
            }
            if model.params.len() != fresh.params.len() {
                return Err(Error::Checkpoint("checkpoint holds unexpected parameters".into()));
            }
        }
        Ok((model, meta.extra))
    }
}

struct Runner<'a> {
    cfg: &'a ModelConfig,
    stats: &'a mut BTreeMap<String, RunningStats>,
    theta: f64,
    folded: bool,
    p: &'a Bound,
    g: &'a mut Graph,
    ctx: &'a mut ForwardCtx,
}

impl Runner<'_> {
    fn forward(&mut self, tokens: Var) -> Result<Var> {
        let c = self.cfg;
        let shape = self.g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != c.token_dim() || shape[1] == 0 || shape[1] > c.context_len {
            return Err(Error::contract(format!(
                "tokens must be [B, N <= {}, {}], got {shape:?}",
                c.context_len,
                c.token_dim()
            )));
        }
        let n = shape[1];
        let e = self.linear("embed", tokens)?;
        let pos = self.p.var("pos")?;
        let pos = self.g.narrow(pos, 0, 0, n)?;
        let e = self.g.add(e, pos)?;
        self.ctx.observe("embed", self.g.value(e));
        let mut x = self.g.repeat_axis(e, 2, c.timesteps())?;
        for i in 0..c.n_blocks {
            x = if c.is_spiking() {
                self.spiking_block(i, x)?
            } else {
                self.reference_block(i, x)?
            };
            self.ctx.observe(&blk(i, "out"), self.g.value(x));
        }
        if !c.is_spiking() {
            x = self.layer_norm("ln_f", x)?;
        }
        if c.readout == Readout::NormMean {
            x = self.layer_norm("readout_norm", x)?;
        }
        let r = self.g.reduce(x, &[2], ReduceOp::Mean)?;
        self.ctx.observe("readout", self.g.value(r));
        let mut y = self.linear("head", r)?;
        if c.action_space == ActionSpace::Continuous {
            y = self.g.tanh(y);
        }
        self.ctx.observe("head", self.g.value(y));
        Ok(y)
    }

    fn spiking_block(&mut self, i: usize, x: Var) -> Result<Var> {
        let s = self.norm_standalone(&blk(i, "norm_in"), x)?;
        let s = self.spike(&blk(i, "sn_in"), s)?;
        let q = self.projection(i, "q", s)?;
        let k = self.projection(i, "k", s)?;
        let v = self.projection(i, "v", s)?;
        if self.ctx.record_rates {
            let (kd, vd) = (self.g.value(k).data(), self.g.value(v).data());
            let ones = kd.iter().zip(vd).filter(|(a, b)| **a * **b != 0.0).count() as u64;
            let total = kd.len() as u64;
            self.ctx.count(&blk(i, "kv"), ones, total);
        }
        let bias = if self.cfg.attn_mode == AttnMode::Pssa {
            Some(self.p.var(&blk(i, "pos_bias"))?)
        } else {
            None
        };
        let strict = self.ctx.spike_mode == SpikeMode::Spike;
        let a = attention::attention(self.g, q, k, v, bias, &self.cfg.attn_config(), strict)?;
        let a = self.norm_standalone(&blk(i, "attn_norm"), a)?;
        let a = self.spike(&blk(i, "attn_sn"), a)?;
        let o = self.linear(&blk(i, "o"), a)?;
        let o = self.norm_after_linear(&blk(i, "o_norm"), o)?;
        let y = self.g.add(x, o)?;

        let m = self.norm_standalone(&blk(i, "mlp_norm"), y)?;
        let m = self.spike(&blk(i, "mlp_sn"), m)?;
        let h = self.linear(&blk(i, "fc1"), m)?;
        let h = self.norm_after_linear(&blk(i, "fc1_norm"), h)?;
        let h = self.spike(&blk(i, "fc1_sn"), h)?;
        let o = self.linear(&blk(i, "fc2"), h)?;
        let o = self.norm_after_linear(&blk(i, "fc2_norm"), o)?;
        self.g.add(y, o)
    }

    /// `SN(PTBN(s W + b))` for one of Q, K, V.
    fn projection(&mut self, i: usize, which: &str, s: Var) -> Result<Var> {
        let h = self.linear(&blk(i, which), s)?;
        let h = self.norm_after_linear(&blk(i, &format!("{which}_norm")), h)?;
        self.spike(&blk(i, &format!("{which}_sn")), h)
    }

    fn reference_block(&mut self, i: usize, x: Var) -> Result<Var> {
        let h = self.layer_norm(&blk(i, "ln1"), x)?;
        let q = self.linear(&blk(i, "q"), h)?;
        let k = self.linear(&blk(i, "k"), h)?;
        let v = self.linear(&blk(i, "v"), h)?;
        let a = attention::attention(self.g, q, k, v, None, &self.cfg.attn_config(), false)?;
        let o = self.linear(&blk(i, "o"), a)?;
        let y = self.g.add(x, o)?;
        let h = self.layer_norm(&blk(i, "ln2"), y)?;
        let h = self.linear(&blk(i, "fc1"), h)?;
        let h = self.g.gelu(h);
        let h = self.linear(&blk(i, "fc2"), h)?;
        self.g.add(y, h)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p.var(&format!("{name}/w"))?;
        let b = self.p.var(&format!("{name}/b"))?;
        let mut shape = self.g.shape(x).to_vec();
        let fan_in = *shape.last().expect("non-scalar input");
        let rows = self.g.value(x).len() / fan_in.max(1);
        let x2 = self.g.reshape(x, &[rows, fan_in])?;
        let y = self.g.matmul(x2, w)?;
        let y = self.g.add(y, b)?;
        *shape.last_mut().expect("non-scalar input") = self.g.shape(w)[1];
        self.g.reshape(y, &shape)
    }

    fn spike(&mut self, name: &str, x: Var) -> Result<Var> {
        let s = lif(self.g, x, 2, &self.cfg.lif, self.ctx.spike_mode)?;
        if self.ctx.record_rates {
            let v = self.g.value(s);
            let ones = v.data().iter().filter(|&&z| z != 0.0).count() as u64;
            let odd = v.data().iter().filter(|&&z| z != 0.0 && z != 1.0).count() as u64;
            self.ctx.non_binary += odd;
            self.ctx.count(name, ones, v.len() as u64);
        }
        Ok(s)
    }

    fn ptbn(&mut self, name: &str, x: Var) -> Result<Var> {
        let lambda = self.p.var(&format!("{name}/lambda"))?;
        let beta = self.p.var(&format!("{name}/beta"))?;
        let stats = self
            .stats
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no running statistics for {name}")))?;
        norm::ptbn(
            self.g,
            x,
            lambda,
            beta,
            &self.cfg.norm,
            self.cfg.lif.u_th,
            stats,
            self.theta,
            self.ctx.training,
        )
    }

    /// PTBN behind a linear layer; after folding it lives inside that layer.
    fn norm_after_linear(&mut self, name: &str, x: Var) -> Result<Var> {
        if self.folded {
            Ok(x)
        } else {
            self.ptbn(name, x)
        }
    }

    fn norm_standalone(&mut self, name: &str, x: Var) -> Result<Var> {
        if self.folded {
            let s = self.p.var(&format!("{name}/scale"))?;
            let h = self.p.var(&format!("{name}/shift"))?;
            let y = self.g.mul(x, s)?;
            self.g.add(y, h)
        } else {
            self.ptbn(name, x)
        }
    }

    fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p.var(&format!("{name}/gamma"))?;
        let beta = self.p.var(&format!("{name}/beta"))?;
        let cfg = NormConfig {
            alpha: 1.0,
            ..self.cfg.norm
        };
        norm::tdln(self.g, x, gamma, beta, &cfg, 1.0)
    }
}

#[cfg(test)]
mod tests;
