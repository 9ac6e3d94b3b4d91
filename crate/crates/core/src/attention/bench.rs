use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{count_attention_ops, instrumented, AttnConfig, AttnMode, OpCount, PositionalBias};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One attention call at one context length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: AttnMode,
    pub n: usize,
    pub counted: OpCount,
    pub closed_form: OpCount,
    pub wall_ms: f64,
}

/// Fitted growth exponents of one mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchFit {
    pub mode: AttnMode,
    pub ops_exponent: f64,
    pub time_exponent: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::contract("exponent fit needs at least two positive (x, y) pairs"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("exponent fit needs at least two distinct x values"));
    }
    Ok(sxy / sxx)
}

/// Run each mode at each context length on random inputs of `batch` windows,
/// recording instrumented and closed-form op counts and wall time.
///
/// Spiking modes get Bernoulli(1/2) spikes, VLA uniform reals. The PSSA
/// window is capped at `n`.
pub fn bench_attention(
    base: &AttnConfig,
    modes: &[AttnMode],
    ns: &[usize],
    batch: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &mode in modes {
        for &n in ns {
            let cfg = AttnConfig {
                mode,
                context_len: n,
                window: base.window.min(n),
                ..*base
            };
            cfg.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [batch, n, cfg.snn_timesteps, cfg.d_model];
            let mut input = || {
                if mode.is_spiking() {
                    Tensor::from_fn(shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                } else {
                    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
                }
            };
            let (q, k, v) = (input(), input(), input());
            let bias = (mode == AttnMode::Pssa).then(|| PositionalBias::init(n, cfg.window, &mut rng).p);
            let start = Instant::now();
            let (_, counted) = instrumented(&q, &k, &v, bias.as_ref(), &cfg)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            rows.push(BenchRow {
                mode,
                n,
                counted,
                closed_form: count_attention_ops(&cfg, batch),
                wall_ms,
            });
        }
    }
    Ok(rows)
}

/// Growth exponents per mode in `rows`, fitted over total op count and wall time.
pub fn fit_rows(rows: &[BenchRow]) -> Result<Vec<BenchFit>> {
    let mut modes: Vec<AttnMode> = rows.iter().map(|r| r.mode).collect();
    modes.dedup();
    modes
        .into_iter()
        .map(|mode| {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let ns: Vec<f64> = sel.iter().map(|r| r.n as f64).collect();
            let ops: Vec<f64> = sel.iter().map(|r| r.counted.total() as f64).collect();
            let times: Vec<f64> = sel.iter().map(|r| r.wall_ms.max(1e-9)).collect();
            Ok(BenchFit {
                mode,
                ops_exponent: fit_exponent(&ns, &ops)?,
                time_exponent: fit_exponent(&ns, &times)?,
            })
        })
        .collect()
}

/// CSV with one row per measurement followed by one `fit` row per mode.
pub fn to_csv(rows: &[BenchRow], fits: &[BenchFit]) -> String {
    let mut s = String::from("mode,n,adds,muls,total,closed_form_total,wall_ms,ops_exponent,time_exponent\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{:.6},,\n",
            r.mode,
            r.n,
            r.counted.adds,
            r.counted.muls,
            r.counted.total(),
            r.closed_form.total(),
            r.wall_ms
        );
    }
    for f in fits {
        s += &format!("{},fit,,,,,,{:.6},{:.6}\n", f.mode, f.ops_exponent, f.time_exponent);
    }
    s
}
