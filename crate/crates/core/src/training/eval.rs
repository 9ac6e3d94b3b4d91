use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{encode_token, normalized_score, token_dim, DatasetMeta, Env};
use crate::error::{Error, Result};
use crate::model::{ActionSpace, Model};
use crate::tensor::Tensor;

/// Reset generator for episode `i` of an evaluation with seed `seed`.
pub fn episode_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r
}

/// Rolling context of one episode: the last `N` tokens and the running return-to-go.
#[derive(Clone, Debug)]
pub struct Context {
    n: usize,
    f: usize,
    tokens: VecDeque<Vec<f64>>,
    pub rtg: f64,
    prev_action: Option<Vec<f64>>,
}

impl Context {
    pub fn new(n: usize, meta: &DatasetMeta, target_return: f64) -> Self {
        Self {
            n,
            f: token_dim(meta),
            tokens: VecDeque::with_capacity(n),
            rtg: target_return,
            prev_action: None,
        }
    }

    /// Append the token for the current state, dropping the oldest beyond `N`.
    pub fn push_state(&mut self, state: &[f64], meta: &DatasetMeta) {
        let mut t = vec![0.0; self.f];
        encode_token(self.prev_action.as_deref(), self.rtg, state, meta, &mut t);
        if self.tokens.len() == self.n {
            self.tokens.pop_front();
        }
        self.tokens.push_back(t);
    }

    /// Record the action taken and the reward observed for the last state.
    pub fn record(&mut self, action: Vec<f64>, reward: f64) {
        self.rtg -= reward;
        self.prev_action = Some(action);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Left-padded `N × token_dim` window.
    pub fn window(&self, out: &mut [f64]) {
        let pad = self.n - self.tokens.len();
        out[..pad * self.f].fill(0.0);
        for (k, t) in self.tokens.iter().enumerate() {
            out[(pad + k) * self.f..(pad + k + 1) * self.f].copy_from_slice(t);
        }
    }
}

/// Map a raw model output row to an environment action.
pub fn decode_action(out: &[f64], space: ActionSpace) -> Vec<f64> {
    match space {
        ActionSpace::Continuous => out.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        ActionSpace::Discrete => {
            let best = out
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > out[b] { i } else { b });
            let mut a = vec![0.0; out.len()];
            a[best] = 1.0;
            a
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean_raw: f64,
    pub std_raw: f64,
    pub mean_normalized: f64,
    pub std_normalized: f64,
}

impl EvalReport {
    pub fn new(returns: Vec<f64>, meta: &DatasetMeta) -> Result<Self> {
        let norm: Vec<f64> = returns
            .iter()
            .map(|r| normalized_score(*r, meta))
            .collect::<Result<_>>()?;
        let (mean_raw, std_raw) = mean_std(&returns);
        let (mean_normalized, std_normalized) = mean_std(&norm);
        Ok(Self {
            returns,
            mean_raw,
            std_raw,
            mean_normalized,
            std_normalized,
        })
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Run `episodes` episodes in lockstep.
///
/// `policy` gets windows `[E, N, token_dim]` for the `E` unfinished episodes
/// (in episode order) and returns outputs `[E, N, action_dim]`; the last
/// position of each row is the action taken.
pub fn rollout<P>(
    meta: &DatasetMeta,
    n: usize,
    episodes: usize,
    target_return: f64,
    seed: u64,
    mut policy: P,
) -> Result<Vec<f64>>
where
    P: FnMut(&Tensor) -> Result<Tensor>,
{
    if n == 0 {
        return Err(Error::Contract("context length must be at least 1".into()));
    }
    let f = token_dim(meta);
    let a = meta.action_dim;
    let mut envs: Vec<Box<dyn Env>> = (0..episodes).map(|_| meta.env.make()).collect::<Result<_>>()?;
    let mut ctxs: Vec<Context> = Vec::with_capacity(episodes);
    for (i, env) in envs.iter_mut().enumerate() {
        let s = env.reset(&mut episode_rng(seed, i));
        let mut c = Context::new(n, meta, target_return);
        c.push_state(&s, meta);
        ctxs.push(c);
    }
    let mut returns = vec![0.0; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    while !live.is_empty() {
        let mut data = vec![0.0; live.len() * n * f];
        for (row, &i) in live.iter().enumerate() {
            ctxs[i].window(&mut data[row * n * f..(row + 1) * n * f]);
        }
        let out = policy(&Tensor::new([live.len(), n, f], data)?)?;
        if out.shape() != [live.len(), n, a] {
            return Err(Error::Rollout(format!(
                "policy returned {:?}, expected {:?}",
                out.shape(),
                [live.len(), n, a]
            )));
        }
        let mut next = Vec::with_capacity(live.len());
        for (row, &i) in live.iter().enumerate() {
            let off = (row * n + n - 1) * a;
            let action = decode_action(&out.data()[off..off + a], meta.action_space);
            let step = envs[i].step(&action)?;
            returns[i] += step.reward;
            ctxs[i].record(action, step.reward);
            if !step.done {
                ctxs[i].push_state(&step.state, meta);
                next.push(i);
            }
        }
        live = next;
    }
    Ok(returns)
}

/// Inference-mode rollouts of `model` conditioned on `target_return`.
/// Weights and running statistics are left untouched.
pub fn evaluate(model: &mut Model, meta: &DatasetMeta, episodes: usize, target_return: f64, seed: u64) -> Result<EvalReport> {
    let c = &model.config;
    if c.token_dim() != token_dim(meta) || c.action_dim != meta.action_dim || c.action_space != meta.action_space {
        return Err(Error::Validation(format!(
            "model expects token_dim {} and {} {:?} actions, dataset has {} and {} {:?}",
            c.token_dim(),
            c.action_dim,
            c.action_space,
            token_dim(meta),
            meta.action_dim,
            meta.action_space
        )));
    }
    let n = c.context_len;
    let returns = rollout(meta, n, episodes, target_return, seed, |x| model.predict(x))?;
    EvalReport::new(returns, meta)
}
