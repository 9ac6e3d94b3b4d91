use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use dsformer::attention::{bench_attention, fit_rows, to_csv, AttnConfig};
use dsformer::data::{generate, load_jsonl, save_jsonl, Dataset, EnvSpec};
use dsformer::energy::{estimate_energy, EnergyReport};
use dsformer::model::{Model, ModelConfig};
use dsformer::tensor::Checkpoint;
use dsformer::training::{
    evaluate, train_and_evaluate, EvalReport, MetricsRecord, Sampler, Seeds, FINAL_CHECKPOINT,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{to_toml, RunConfig};
use crate::exit::{self, ConfigError, DataError};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn env_spec(cfg: &RunConfig) -> Result<EnvSpec> {
    let d = &cfg.data;
    match d.env.as_str() {
        "keydoor" => Ok(EnvSpec::KeyDoor {
            grid: d.grid,
            max_len: d.max_len.unwrap_or(8 * d.grid.saturating_sub(1)),
            sparse: d.sparse,
        }),
        "reacher" => Ok(EnvSpec::Reacher {
            max_len: d.max_len.unwrap_or(50),
        }),
        other => Err(ConfigError(format!("unknown env {other:?} (expected keydoor or reacher)")).into()),
    }
}

/// Dataset file written by gen-data: `--out` itself when it names a
/// `.jsonl` file, `<out>/dataset.jsonl` otherwise.
pub fn dataset_output(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "jsonl") {
        out.to_path_buf()
    } else {
        out.join("dataset.jsonl")
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = env_spec(cfg)?;
    let ds = generate(spec, cfg.data.episodes, cfg.data.quality, cfg.seed).context("generating dataset")?;
    let path = dataset_output(&cfg.out);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_jsonl(&ds, &path)?;
    println!(
        "wrote {} ({} episodes, {} steps, random {:.4}, expert {:.4})",
        path.display(),
        ds.trajectories.len(),
        ds.steps(),
        ds.meta.random_score,
        ds.meta.expert_score
    );
    Ok(path)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| ConfigError("no dataset given (--data or data.path)".into()))?;
    if !path.exists() {
        return Err(DataError(format!("dataset {} does not exist", path.display())).into());
    }
    Ok(load_jsonl(path).with_context(|| format!("loading {}", path.display()))?)
}

/// Model config with the dataset-determined fields filled in.
fn fit_to(model: &ModelConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        state_dim: ds.meta.state_dim,
        action_dim: ds.meta.action_dim,
        action_space: ds.meta.action_space,
        max_episode_len: ds.meta.env.max_len(),
        ..model.clone()
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seeds: Seeds,
    records: &'a [MetricsRecord],
    final_eval: &'a EvalReport,
    parameters: usize,
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<EvalReport> {
    cfg.training.validate()?;
    cfg.model.validate()?;
    let ds = load_dataset(cfg)?;
    let model_cfg = fit_to(&cfg.model, &ds);
    let resolved = RunConfig {
        model: model_cfg.clone(),
        ..cfg.clone()
    };
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("config.toml"), &to_toml(&resolved)?)?;
    let report = train_and_evaluate(&model_cfg, &cfg.training, &ds, Some(&cfg.out), resume)?;
    write_json(
        &cfg.out.join("train_report.json"),
        &TrainSummary {
            seeds: report.seeds,
            records: &report.records,
            final_eval: &report.final_eval,
            parameters: report.model.parameter_count(),
        },
    )?;
    for r in &report.records {
        println!(
            "step {:>6}  loss {:.5}  theta {:.3}  lr {:.2e}  spike rate {:.4}  score {:.2}",
            r.step, r.loss, r.theta, r.lr, r.spike_rate_mean, r.eval_score_normalized
        );
    }
    println!("final checkpoint: {}", cfg.out.join(FINAL_CHECKPOINT).display());
    Ok(report.final_eval)
}

/// Load a checkpoint ready for inference, folding it when needed.
fn load_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(DataError(format!("checkpoint {} does not exist", path.display())).into());
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (mut model, _) = Model::from_checkpoint(&ck)?;
    if !model.is_folded() {
        eprintln!(
            "notice: {} is not folded; setting theta {} -> 0 and folding normalization into the linear layers",
            path.display(),
            model.theta
        );
        model.theta = 0.0;
        model.fold()?;
    }
    Ok(model)
}

fn checkpoint_arg(cfg: &RunConfig) -> Result<&Path> {
    Ok(cfg
        .eval
        .checkpoint
        .as_deref()
        .ok_or_else(|| ConfigError("no checkpoint given (--checkpoint or eval.checkpoint)".into()))?)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    episodes: usize,
    target_return: f64,
    seed: u64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let path = checkpoint_arg(cfg)?;
    let ds = load_dataset(cfg)?;
    let mut model = load_model(path)?;
    let target = cfg.eval.target_return_multiplier * ds.meta.expert_score;
    let seed = Seeds::derive(cfg.seed).eval;
    let report = evaluate(&mut model, &ds.meta, cfg.eval.episodes, target, seed)?;
    write_json(
        &cfg.out.join("eval.json"),
        &EvalOutput {
            checkpoint: path,
            episodes: cfg.eval.episodes,
            target_return: target,
            seed: cfg.seed,
            report: &report,
        },
    )?;
    println!(
        "normalized score {:.2} ± {:.2} over {} episodes (raw {:.4} ± {:.4})",
        report.mean_normalized, report.std_normalized, cfg.eval.episodes, report.mean_raw, report.std_raw
    );
    Ok(report)
}

pub fn bench_attn(cfg: &RunConfig) -> Result<String> {
    let base = AttnConfig {
        snn_timesteps: cfg.model.snn_timesteps,
        ..cfg.model.attn_config()
    };
    let rows = bench_attention(&base, &cfg.bench.modes, &cfg.bench.ns, cfg.bench.batch, cfg.seed)?;
    let csv = to_csv(&rows, &fit_rows(&rows)?);
    write(&cfg.out.join("bench_attn.csv"), &csv)?;
    print!("{csv}");
    Ok(csv)
}

pub fn energy(cfg: &RunConfig) -> Result<EnergyReport> {
    let path = checkpoint_arg(cfg)?;
    let ds = load_dataset(cfg)?;
    let model = load_model(path)?;
    let sampler = Sampler::new(&ds, model.config.context_len)?;
    let batch = sampler.batch(cfg.energy.batch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let report = estimate_energy(&model, &batch.tokens, &cfg.energy.model())?;
    write_json(&cfg.out.join("energy.json"), &report)?;
    print!("{}", report.table());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub timesteps: usize,
    pub window: usize,
    pub seed: u64,
    pub status: String,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
    pub error: Option<String>,
}

fn cell_config(cfg: &RunConfig, t: usize, s: usize, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.model.snn_timesteps = t;
    c.model.window = s;
    c.seed = seed;
    c.training.seed = seed;
    c.out = cfg.out.join(format!("T{t}_S{s}_seed{seed}"));
    c
}

/// One train then eval per cell, as the train and eval commands would run them.
fn run_cell(cfg: &RunConfig) -> Result<EvalReport> {
    train(cfg, None)?;
    let eval_cfg = RunConfig {
        eval: crate::config::EvalConfig {
            checkpoint: Some(cfg.out.join(FINAL_CHECKPOINT)),
            ..cfg.eval.clone()
        },
        ..cfg.clone()
    };
    eval(&eval_cfg)
}

/// Worker count: `DSF_THREADS` if set, else the available parallelism.
pub fn workers() -> Result<usize> {
    match std::env::var("DSF_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| ConfigError(format!("DSF_THREADS must be a positive integer, got {v:?}")).into()),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let s = &cfg.sweep;
    let cells: Vec<RunConfig> = s
        .timesteps
        .iter()
        .flat_map(|&t| s.windows.iter().flat_map(move |&w| s.seeds.iter().map(move |&k| (t, w, k))))
        .map(|(t, w, k)| cell_config(cfg, t, w, k))
        .collect();
    if cells.is_empty() {
        return Err(ConfigError("sweep grid is empty".into()).into());
    }
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<SweepRow>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let n_workers = workers()?.min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = cells.get(i) else { break };
                let outcome = run_cell(c);
                let row = SweepRow {
                    timesteps: c.model.snn_timesteps,
                    window: c.model.window,
                    seed: c.seed,
                    status: if outcome.is_ok() { "ok".into() } else { "failed".into() },
                    score_mean: outcome.as_ref().ok().map(|r| r.mean_normalized),
                    score_std: outcome.as_ref().ok().map(|r| r.std_normalized),
                    error: outcome.as_ref().err().map(|e| format!("{e:#} (exit code {})", exit::code(e))),
                };
                *results[i].lock().expect("no worker panicked") = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = results
        .into_iter()
        .map(|m| m.into_inner().expect("no worker panicked").expect("every cell ran"))
        .collect();
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    let mut csv = String::from("timesteps,window,seed,status,score_mean,score_std\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.timesteps,
            r.window,
            r.seed,
            r.status,
            fmt(r.score_mean),
            fmt(r.score_std)
        );
    }
    write(&cfg.out.join("sweep.csv"), &csv)?;
    write_json(&cfg.out.join("sweep.json"), &rows)?;
    println!("{:>3} {:>3} {:>6} {:>8} {:>10} {:>10}", "T", "S", "seed", "status", "score", "std");
    for r in &rows {
        println!(
            "{:>3} {:>3} {:>6} {:>8} {:>10} {:>10}",
            r.timesteps,
            r.window,
            r.seed,
            r.status,
            fmt(r.score_mean),
            fmt(r.score_std)
        );
        if let Some(e) = &r.error {
            eprintln!("cell T={} S={} seed={} failed: {e}", r.timesteps, r.window, r.seed);
        }
    }
    Ok(rows)
}
