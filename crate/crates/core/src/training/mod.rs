//! Supervised next-action training with the PTBN blend schedule, and
//! return-conditioned evaluation.

mod eval;
mod loss;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{decode_action, episode_rng, evaluate, rollout, Context, EvalReport};
pub use loss::action_loss;
pub use optim::{clip_grad_norm, global_norm, learning_rate, AdamW, OptimState};

use crate::data::{compute_rtg, token_dim, window_with_rtg, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model, ModelConfig};
use crate::norm::theta_schedule;
use crate::tensor::{Checkpoint, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// `T_p / total_steps`.
    pub ptbn_fraction: f64,
    /// Defaults to 10% of `total_steps`.
    pub warmup_steps: Option<u64>,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub target_return_multiplier: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            grad_clip_norm: 0.25,
            ptbn_fraction: 0.8,
            warmup_steps: None,
            eval_every: 500,
            eval_episodes: 10,
            target_return_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(m.to_string()));
        if self.total_steps == 0 {
            return fail("total_steps must be at least 1");
        }
        if !(self.ptbn_fraction > 0.0 && self.ptbn_fraction <= 1.0) {
            return fail("ptbn_fraction must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return fail("learning_rate and weight_decay must be non-negative");
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail("grad_clip_norm must be positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1");
        }
        if !self.target_return_multiplier.is_finite() {
            return fail("target_return_multiplier must be finite");
        }
        Ok(())
    }

    /// `T_p = ceil(ptbn_fraction * total_steps)`.
    pub fn ptbn_steps(&self) -> u64 {
        ((self.ptbn_fraction * self.total_steps as f64).ceil() as u64).clamp(1, self.total_steps)
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (self.total_steps as f64 * 0.1).ceil() as u64)
    }
}

/// Independent sub-seeds derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let sub = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r.next_u64()
        };
        Self {
            model: sub(1),
            data: sub(2),
            eval: sub(3),
        }
    }

    /// Generator for the batch of training step `step`, independent of any
    /// earlier step so resumed runs draw the same batches.
    pub fn batch_rng(&self, step: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.data);
        r.set_stream(step);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, N, token_dim]`
    pub tokens: Tensor,
    /// `[B, N, action_dim]`
    pub targets: Tensor,
    /// `B * N` flags, false at padding.
    pub mask: Vec<bool>,
}

/// Draws windows uniformly over all steps of a dataset.
pub struct Sampler<'a> {
    ds: &'a Dataset,
    rtgs: Vec<Vec<f64>>,
    /// Steps before each trajectory.
    offsets: Vec<usize>,
    total: usize,
    n: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(ds: &'a Dataset, n: usize) -> Result<Self> {
        let rtgs = ds.trajectories.iter().map(|t| compute_rtg(&t.rewards)).collect();
        let mut offsets = Vec::with_capacity(ds.trajectories.len());
        let mut total = 0;
        for t in &ds.trajectories {
            offsets.push(total);
            total += t.len();
        }
        if total == 0 {
            return Err(Error::Validation("dataset holds no transitions".into()));
        }
        Ok(Self {
            ds,
            rtgs,
            offsets,
            total,
            n,
        })
    }

    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Result<Batch> {
        let meta = &self.ds.meta;
        let (n, f, a) = (self.n, token_dim(meta), meta.action_dim);
        let mut tokens = Vec::with_capacity(size * n * f);
        let mut targets = Vec::with_capacity(size * n * a);
        let mut mask = Vec::with_capacity(size * n);
        for _ in 0..size {
            let k = rng.random_range(0..self.total);
            let ti = self.offsets.partition_point(|&o| o <= k) - 1;
            let l = k - self.offsets[ti];
            let w = window_with_rtg(&self.ds.trajectories[ti], &self.rtgs[ti], l, n, meta)?;
            tokens.extend(w.tokens);
            targets.extend(w.targets);
            mask.extend(w.mask);
        }
        Ok(Batch {
            tokens: Tensor::new([size, n, f], tokens)?,
            targets: Tensor::new([size, n, a], targets)?,
            mask,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Blend weight used by this step.
    pub theta: f64,
    pub spike_rate_mean: f64,
}

/// Mean firing rate over all neuron layers recorded in `ctx`.
pub fn mean_spike_rate(ctx: &ForwardCtx) -> f64 {
    let rates: Vec<f64> = ctx
        .rates
        .iter()
        .filter(|(n, _)| !n.ends_with("/kv"))
        .map(|(_, c)| c.rate())
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

fn numeric_failure(model: &Model, batch: &Batch, what: &str, value: f64) -> Error {
    let mut probe = model.clone();
    let mut g = Graph::inference();
    let p = probe.bind(&mut g);
    let x = g.constant(batch.tokens.clone());
    let mut ctx = ForwardCtx {
        record_stats: true,
        ..ForwardCtx::training()
    };
    let _ = probe.forward(&mut g, &p, x, &mut ctx);
    let dump = serde_json::to_string(&ctx.stats).unwrap_or_default();
    Error::Numeric(format!("{what} is {value}; layer activations: {dump}"))
}

/// One optimizer step at global step `step`, then advance the PTBN blend to
/// `theta_schedule(T_p, step + 1)`.
pub fn train_step(model: &mut Model, batch: &Batch, optim: &mut AdamW, cfg: &TrainConfig, step: u64) -> Result<StepMetrics> {
    let lr = learning_rate(cfg.learning_rate, cfg.warmup(), step);
    let theta = model.theta;
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let x = g.constant(batch.tokens.clone());
    let mut ctx = ForwardCtx {
        record_rates: true,
        ..ForwardCtx::training()
    };
    let before = model.clone();
    let y = model.forward(&mut g, &p, x, &mut ctx)?;
    let loss = action_loss(&mut g, y, &batch.targets, &batch.mask, model.config.action_space)?;
    let lv = g.value(loss).item()?;
    if !lv.is_finite() {
        return Err(numeric_failure(&before, batch, "loss", lv));
    }
    g.backward(loss)?;
    let mut grads = p.grads(&g);
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(numeric_failure(&before, batch, "gradient norm", grad_norm));
    }
    optim.update(&mut model.params, &grads, lr)?;
    model.theta = theta_schedule(cfg.ptbn_steps(), step + 1)?;
    Ok(StepMetrics {
        loss: lv,
        grad_norm,
        lr,
        theta,
        spike_rate_mean: mean_spike_rate(&ctx),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Blend weight after this step.
    pub theta: f64,
    pub lr: f64,
    pub spike_rate_mean: f64,
    pub eval_score_raw: f64,
    pub eval_score_normalized: f64,
}

/// Metadata stored with training checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub seeds: Seeds,
    pub train: TrainConfig,
}

pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    /// Per-step metrics of the steps run by this call.
    pub steps: Vec<StepMetrics>,
    pub seeds: Seeds,
    pub final_eval: EvalReport,
    /// Folded model after the last step.
    pub model: Model,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn save_training_checkpoint(path: &Path, model: &Model, optim: &AdamW, state: &TrainState) -> Result<()> {
    let mut ck = model.to_checkpoint(serde_json::to_value(state)?)?;
    optim.save_into(&mut ck)?;
    ck.save(path)
}

/// Check that a model config fits a dataset.
pub fn check_compatible(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.meta;
    if model.state_dim != m.state_dim || model.action_dim != m.action_dim || model.action_space != m.action_space {
        return Err(Error::Validation(format!(
            "model takes state_dim {}, action_dim {} ({:?}); dataset has {}, {} ({:?})",
            model.state_dim, model.action_dim, model.action_space, m.state_dim, m.action_dim, m.action_space
        )));
    }
    Ok(())
}

/// Full training run with periodic evaluation.
///
/// A record is produced every `eval_every` steps and after the last step; the
/// last one evaluates the folded model. With `out_dir` set, records are
/// appended to `metrics.jsonl`, a checkpoint with optimizer state is written
/// at every intermediate record and the folded model goes to `final.ckpt`.
/// `resume` continues from such a checkpoint; batches depend only on the
/// seed and step index, so the loss trace matches an uninterrupted run.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    model_cfg.validate()?;
    ds.validate()?;
    check_compatible(model_cfg, ds)?;
    let seeds = Seeds::derive(cfg.seed);
    let (mut model, mut optim, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.is_folded() {
                return Err(Error::Checkpoint("cannot resume training from a folded checkpoint".into()));
            }
            let (model, extra) = Model::from_checkpoint(&ck)?;
            let state: TrainState = serde_json::from_value(extra)
                .map_err(|e| Error::Checkpoint(format!("checkpoint lacks training state: {e}")))?;
            if state.seeds != seeds || model.config != *model_cfg {
                return Err(Error::Checkpoint("checkpoint was written by a different configuration".into()));
            }
            let mut optim = AdamW::new(cfg.weight_decay);
            optim.load_from(&ck, state.step);
            (model, optim, state.step)
        }
        None => (Model::new(model_cfg.clone(), seeds.model)?, AdamW::new(cfg.weight_decay), 0),
    };
    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            let file = if resume.is_some() {
                OpenOptions::new().create(true).append(true).open(path)?
            } else {
                File::create(path)?
            };
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let sampler = Sampler::new(ds, model_cfg.context_len)?;
    let target = cfg.target_return_multiplier * ds.meta.expert_score;
    let mut records = Vec::new();
    let mut steps = Vec::new();
    let (mut acc_loss, mut acc_rate, mut acc_n) = (0.0, 0.0, 0usize);
    let mut emit = |records: &mut Vec<MetricsRecord>, rec: MetricsRecord| -> Result<()> {
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        records.push(rec);
        Ok(())
    };
    for step in start..cfg.total_steps {
        let batch = sampler.batch(cfg.batch_size, &mut seeds.batch_rng(step))?;
        let m = train_step(&mut model, &batch, &mut optim, cfg, step)?;
        acc_loss += m.loss;
        acc_rate += m.spike_rate_mean;
        acc_n += 1;
        steps.push(m);
        let done = step + 1;
        if done % cfg.eval_every == 0 && done < cfg.total_steps {
            let ev = evaluate(&mut model, &ds.meta, cfg.eval_episodes, target, seeds.eval)?;
            let rec = MetricsRecord {
                step: done,
                loss: acc_loss / acc_n as f64,
                theta: model.theta,
                lr: m.lr,
                spike_rate_mean: acc_rate / acc_n as f64,
                eval_score_raw: ev.mean_raw,
                eval_score_normalized: ev.mean_normalized,
            };
            emit(&mut records, rec)?;
            (acc_loss, acc_rate, acc_n) = (0.0, 0.0, 0);
            if let Some(dir) = out_dir {
                let state = TrainState {
                    step: done,
                    seeds,
                    train: cfg.clone(),
                };
                save_training_checkpoint(&checkpoint_path(dir, done), &model, &optim, &state)?;
            }
        }
    }
    model.theta = theta_schedule(cfg.ptbn_steps(), cfg.total_steps)?;
    model.fold()?;
    let final_eval = evaluate(&mut model, &ds.meta, cfg.eval_episodes, target, seeds.eval)?;
    let n = acc_n.max(1) as f64;
    let rec = MetricsRecord {
        step: cfg.total_steps,
        loss: acc_loss / n,
        theta: model.theta,
        lr: steps.last().map_or(cfg.learning_rate, |m| m.lr),
        spike_rate_mean: acc_rate / n,
        eval_score_raw: final_eval.mean_raw,
        eval_score_normalized: final_eval.mean_normalized,
    };
    emit(&mut records, rec)?;
    if let Some(dir) = out_dir {
        let state = TrainState {
            step: cfg.total_steps,
            seeds,
            train: cfg.clone(),
        };
        model.to_checkpoint(serde_json::to_value(&state)?)?.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainReport {
        records,
        steps,
        seeds,
        final_eval,
        model,
    })
}
