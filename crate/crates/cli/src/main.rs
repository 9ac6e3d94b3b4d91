mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dsformer::attention::AttnMode;
use dsformer::data::Quality;
use toml::{Table, Value};

use config::{resolve, set};

#[derive(Parser)]
#[command(name = "dsformer", version, about = "Spike-driven decision transformer for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; every file a command writes goes under it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    attn: Option<AttnMode>,
}

#[derive(Args, Clone, Default)]
struct ArchFlags {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    #[command(flatten)]
    arch: ArchFlags,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset as JSONL.
    GenData {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        quality: Option<Quality>,
        #[arg(long)]
        sparse: bool,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset, evaluating periodically; writes checkpoints and metrics.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a training checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Roll out a checkpoint and report the normalized score.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        target_multiplier: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Attention op counts and wall time over context lengths, as CSV.
    BenchAttn {
        /// Comma-separated context lengths.
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<AttnMode>>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer energy estimate of a checkpoint from measured spike rates.
    Energy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate over a grid of timesteps and windows.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        timesteps: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        arch: ArchFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
}

fn put<T: Into<Value>>(t: &mut Table, key: &str, v: Option<T>) {
    if let Some(v) = v {
        set(t, key, v);
    }
}

fn path_value(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.to_string_lossy().into_owned())
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|v| v as i64)
}

fn list<T: Into<Value>>(v: Option<Vec<T>>) -> Option<Value> {
    v.map(|v| Value::Array(v.into_iter().map(Into::into).collect()))
}

fn common_flags(t: &mut Table, c: &Common) {
    put(t, "seed", c.seed.map(|s| s as i64));
    put(t, "out", path_value(c.out.clone()));
    put(t, "model.attn_mode", c.attn.map(|m| m.as_str()));
}

fn arch_flags(t: &mut Table, a: &ArchFlags) {
    put(t, "model.d_model", int(a.d_model));
    put(t, "model.n_blocks", int(a.blocks));
    put(t, "model.context_len", int(a.context_len));
}

fn model_flags(t: &mut Table, m: &ModelFlags) {
    arch_flags(t, &m.arch);
    put(t, "model.snn_timesteps", int(m.timesteps));
    put(t, "model.window", int(m.window));
}

fn train_flags(t: &mut Table, f: &TrainFlags) {
    put(t, "training.total_steps", f.steps.map(|v| v as i64));
    put(t, "training.batch_size", int(f.batch_size));
    put(t, "training.learning_rate", f.lr);
    put(t, "training.eval_every", f.eval_every.map(|v| v as i64));
    put(t, "training.eval_episodes", int(f.eval_episodes));
}

fn run(cli: Cli) -> Result<()> {
    let mut t = Table::new();
    match cli.command {
        Command::GenData {
            env,
            episodes,
            quality,
            sparse,
            grid,
            max_len,
            common,
        } => {
            common_flags(&mut t, &common);
            put(&mut t, "data.env", env);
            put(&mut t, "data.episodes", int(episodes));
            put(&mut t, "data.quality", quality.map(|q| format!("{q:?}").to_lowercase()));
            put(&mut t, "data.sparse", sparse.then_some(true));
            put(&mut t, "data.grid", int(grid));
            put(&mut t, "data.max_len", int(max_len));
            commands::gen_data(&resolve(common.config.as_deref(), t)?)?;
        }
        Command::Train {
            data,
            resume,
            model,
            train,
            common,
        } => {
            common_flags(&mut t, &common);
            put(&mut t, "data.path", path_value(data));
            model_flags(&mut t, &model);
            train_flags(&mut t, &train);
            commands::train(&resolve(common.config.as_deref(), t)?, resume.as_deref())?;
        }
        Command::Eval {
            checkpoint,
            data,
            episodes,
            target_multiplier,
            common,
        } => {
            common_flags(&mut t, &common);
            put(&mut t, "eval.checkpoint", path_value(checkpoint));
            put(&mut t, "data.path", path_value(data));
            put(&mut t, "eval.episodes", int(episodes));
            put(&mut t, "eval.target_return_multiplier", target_multiplier);
            commands::eval(&resolve(common.config.as_deref(), t)?)?;
        }
        Command::BenchAttn {
            ns,
            modes,
            batch,
            model,
            common,
        } => {
            common_flags(&mut t, &common);
            put(&mut t, "bench.ns", list(ns.map(|v| v.into_iter().map(|n| n as i64).collect())));
            put(&mut t, "bench.modes", list(modes.map(|v| v.into_iter().map(|m| m.as_str()).collect())));
            put(&mut t, "bench.batch", int(batch));
            model_flags(&mut t, &model);
            commands::bench_attn(&resolve(common.config.as_deref(), t)?)?;
        }
        Command::Energy {
            checkpoint,
            data,
            batch,
            common,
        } => {
            common_flags(&mut t, &common);
            put(&mut t, "eval.checkpoint", path_value(checkpoint));
            put(&mut t, "data.path", path_value(data));
            put(&mut t, "energy.batch", int(batch));
            commands::energy(&resolve(common.config.as_deref(), t)?)?;
        }
        Command::Sweep {
            data,
            timesteps,
            windows,
            seeds,
            arch,
            train,
            common,
        } => {
            common_flags(&mut t, &common);
            put(&mut t, "data.path", path_value(data));
            put(&mut t, "sweep.timesteps", list(timesteps.map(|v| v.into_iter().map(|n| n as i64).collect())));
            put(&mut t, "sweep.windows", list(windows.map(|v| v.into_iter().map(|n| n as i64).collect())));
            put(&mut t, "sweep.seeds", list(seeds.map(|v| v.into_iter().map(|n| n as i64).collect())));
            arch_flags(&mut t, &arch);
            train_flags(&mut t, &train);
            let rows = commands::sweep(&resolve(common.config.as_deref(), t)?)?;
            if rows.iter().all(|r| r.status != "ok") {
                anyhow::bail!("every sweep cell failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e) as u8)
        }
    }
}
