//! Offline trajectories: return-to-go, context windows, synthetic environments
//! and the JSONL file format.

mod jsonl;
mod keydoor;
mod reacher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use jsonl::{load_jsonl, save_jsonl};
pub use keydoor::KeyDoor;
pub use reacher::Reacher;

use crate::error::{Error, Result};
use crate::model::ActionSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `L + 1` states including the one reached after the last action.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn validate(&self, meta: &DatasetMeta) -> Result<()> {
        let l = self.actions.len();
        if self.rewards.len() != l || self.states.len() != l + 1 {
            return Err(Error::Validation(format!(
                "{} states, {} actions, {} rewards (need L+1, L, L)",
                self.states.len(),
                l,
                self.rewards.len()
            )));
        }
        if let Some(s) = self.states.iter().find(|s| s.len() != meta.state_dim) {
            return Err(Error::Validation(format!(
                "state of length {} but state_dim is {}",
                s.len(),
                meta.state_dim
            )));
        }
        if let Some(a) = self.actions.iter().find(|a| a.len() != meta.action_dim) {
            return Err(Error::Validation(format!(
                "action of length {} but action_dim is {}",
                a.len(),
                meta.action_dim
            )));
        }
        Ok(())
    }
}

/// Behavior policy used to collect a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Random,
    Medium,
    Expert,
}

impl std::str::FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Quality::Random),
            "medium" => Ok(Quality::Medium),
            "expert" => Ok(Quality::Expert),
            _ => Err(Error::Validation(format!("unknown quality {s:?} (expected random, medium or expert)"))),
        }
    }
}

/// Environment parameters, enough to rebuild the environment for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    KeyDoor { grid: usize, max_len: usize, sparse: bool },
    Reacher { max_len: usize },
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::KeyDoor { .. } => "keydoor",
            EnvSpec::Reacher { .. } => "reacher",
        }
    }

    pub fn max_len(&self) -> usize {
        match *self {
            EnvSpec::KeyDoor { max_len, .. } | EnvSpec::Reacher { max_len } => max_len,
        }
    }

    pub fn make(&self) -> Result<Box<dyn Env>> {
        Ok(match *self {
            EnvSpec::KeyDoor { grid, max_len, sparse } => Box::new(KeyDoor::new(grid, max_len, sparse)?),
            EnvSpec::Reacher { max_len } => Box::new(Reacher::new(max_len)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// `done` because the task was completed rather than the step budget ran out.
    pub terminal: bool,
}

pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Start a new episode; layout randomness comes from `rng`.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    /// The behavior policy of the given quality. Medium mixes per episode, so
    /// `episode_expert` says which half the current episode belongs to.
    fn behavior_action(&self, quality: Quality, episode_expert: bool, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_name: String,
    pub env: EnvSpec,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_space: ActionSpace,
    pub quality: Quality,
    pub seed: u64,
    pub rtg_scale: f64,
    pub random_score: f64,
    pub expert_score: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.state_mean.len() != self.state_dim || self.state_std.len() != self.state_dim {
            return Err(Error::Validation("state statistics do not match state_dim".into()));
        }
        if self.state_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("state_std must be positive".into()));
        }
        if !(self.rtg_scale > 0.0) {
            return Err(Error::Validation("rtg_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.trajectories.iter().try_for_each(|t| t.validate(&self.meta))
    }

    pub fn steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn mean_return(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.total_reward()).sum::<f64>() / self.trajectories.len() as f64
    }
}

/// `R̂_l = Σ_{l' >= l} r_{l'}`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

pub fn normalized_score(raw: f64, meta: &DatasetMeta) -> Result<f64> {
    if !(meta.expert_score > meta.random_score) {
        return Err(Error::contract(format!(
            "expert score {} must exceed random score {}",
            meta.expert_score, meta.random_score
        )));
    }
    Ok(100.0 * (raw - meta.random_score) / (meta.expert_score - meta.random_score))
}

/// One model input window, left-padded to `N` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `N × token_dim` flat, each token `[prev_action; rtg / rtg_scale; standardized state]`.
    pub tokens: Vec<f64>,
    /// `N × action_dim` flat action targets.
    pub targets: Vec<f64>,
    /// Real (unpadded) positions.
    pub mask: Vec<bool>,
}

pub fn token_dim(meta: &DatasetMeta) -> usize {
    meta.action_dim + 1 + meta.state_dim
}

/// Write one token into `out`.
pub fn encode_token(prev_action: Option<&[f64]>, rtg: f64, state: &[f64], meta: &DatasetMeta, out: &mut [f64]) {
    let a = meta.action_dim;
    match prev_action {
        Some(p) => out[..a].copy_from_slice(p),
        None => out[..a].fill(0.0),
    }
    out[a] = rtg / meta.rtg_scale;
    for (k, s) in state.iter().enumerate() {
        out[a + 1 + k] = (s - meta.state_mean[k]) / meta.state_std[k];
    }
}

/// The window ending at step `l`: tokens for steps `l-N+1 ..= l`, target
/// actions `a_{l-N+1} ..= a_l`, zero tokens and a false mask where the step
/// index would be negative.
pub fn sample_window(traj: &Trajectory, l: usize, n: usize, meta: &DatasetMeta) -> Result<Window> {
    if l >= traj.len() {
        return Err(Error::contract(format!(
            "window end {l} outside trajectory of {} actions",
            traj.len()
        )));
    }
    let rtg = compute_rtg(&traj.rewards);
    window_with_rtg(traj, &rtg, l, n, meta)
}

pub(crate) fn window_with_rtg(traj: &Trajectory, rtg: &[f64], l: usize, n: usize, meta: &DatasetMeta) -> Result<Window> {
    if n == 0 {
        return Err(Error::contract("window length must be at least 1"));
    }
    let f = token_dim(meta);
    let a = meta.action_dim;
    let mut w = Window {
        tokens: vec![0.0; n * f],
        targets: vec![0.0; n * a],
        mask: vec![false; n],
    };
    for k in 0..n {
        let Some(idx) = (l + k + 1).checked_sub(n) else {
            continue;
        };
        let prev = idx.checked_sub(1).map(|p| traj.actions[p].as_slice());
        encode_token(prev, rtg[idx], &traj.states[idx], meta, &mut w.tokens[k * f..(k + 1) * f]);
        w.targets[k * a..(k + 1) * a].copy_from_slice(&traj.actions[idx]);
        w.mask[k] = true;
    }
    Ok(w)
}

/// Dataset-wide state mean and standard deviation (floored at 1 where a
/// coordinate is constant).
pub fn state_statistics(trajs: &[Trajectory], state_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut mean = vec![0.0; state_dim];
    for s in trajs.iter().flat_map(|t| &t.states) {
        n += 1.0;
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    if n == 0.0 {
        return (mean, vec![1.0; state_dim]);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; state_dim];
    for s in trajs.iter().flat_map(|t| &t.states) {
        for ((q, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *q += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|q| {
            let s = (q / n).sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

/// Roll out one episode of a behavior policy.
pub fn collect_episode(env: &mut dyn Env, quality: Quality, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let mut states = vec![env.reset(rng)];
    let expert_half = match quality {
        Quality::Medium => rand::Rng::random_bool(rng, 0.5),
        Quality::Expert => true,
        Quality::Random => false,
    };
    let (mut actions, mut rewards) = (Vec::new(), Vec::new());
    loop {
        let a = env.behavior_action(quality, expert_half, rng);
        let step = env.step(&a)?;
        actions.push(a);
        rewards.push(step.reward);
        states.push(step.state);
        if step.done {
            return Ok(Trajectory {
                states,
                actions,
                rewards,
                terminal: step.terminal,
            });
        }
    }
}

const SCORE_EPISODES: usize = 200;

/// Generate a dataset of `episodes` behavior-policy episodes.
///
/// Reference scores come from simulating the random and expert behavior
/// policies on a separate random stream, so they do not depend on
/// `episodes` or `quality`.
pub fn generate(spec: EnvSpec, episodes: usize, quality: Quality, seed: u64) -> Result<Dataset> {
    let mut env = spec.make()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = (0..episodes)
        .map(|_| collect_episode(env.as_mut(), quality, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut score = |q: Quality, stream: u64| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        let mut total = 0.0;
        for _ in 0..SCORE_EPISODES {
            total += collect_episode(env.as_mut(), q, &mut r)?.total_reward();
        }
        Ok(total / SCORE_EPISODES as f64)
    };
    let random_score = score(Quality::Random, 1)?;
    let expert_score = score(Quality::Expert, 2)?;
    if !(expert_score > random_score) {
        return Err(Error::Generation(format!(
            "expert score {expert_score} does not exceed random score {random_score}"
        )));
    }
    let (state_mean, state_std) = state_statistics(&trajectories, env.state_dim());
    let max_abs = trajectories.iter().map(|t| t.total_reward().abs()).fold(0.0, f64::max);
    let meta = DatasetMeta {
        env_name: spec.name().to_string(),
        env: spec,
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        action_space: env.action_space(),
        quality,
        seed,
        rtg_scale: if max_abs > 0.0 { max_abs } else { 1.0 },
        random_score,
        expert_score,
        state_mean,
        state_std,
    };
    Ok(Dataset { meta, trajectories })
}

pub fn gen_keydoor(episodes: usize, grid: usize, max_len: usize, quality: Quality, sparse: bool, seed: u64) -> Result<Dataset> {
    generate(EnvSpec::KeyDoor { grid, max_len, sparse }, episodes, quality, seed)
}

pub fn gen_reacher(episodes: usize, max_len: usize, quality: Quality, seed: u64) -> Result<Dataset> {
    generate(EnvSpec::Reacher { max_len }, episodes, quality, seed)
}
