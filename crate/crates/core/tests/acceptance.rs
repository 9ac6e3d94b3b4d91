//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary fails if any criterion fails.
//!
//! Pass a substring as the first argument to run only matching criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use dsformer::attention::{
    bench_attention, count_attention_ops, fit_rows, instrumented, pssa_attention, sssa_attention,
    temporal_entropy, tssa_attention, vla_attention, AttnConfig, AttnMode, PositionalBias,
};
use dsformer::data::{gen_keydoor, Dataset, Quality};
use dsformer::energy::{estimate_energy, EnergyModel};
use dsformer::gradcheck::check_coordinates;
use dsformer::model::{ActionSpace, Bound, ForwardCtx, Model, ModelConfig, ParamStore};
use dsformer::neuron::{lif_sequence, lif_step, LifParams, LifState, SpikeMode};
use dsformer::norm::{
    fold_into_linear, ptbn_forward, tdbn_forward, tdln_forward, theta_schedule, NormConfig, NormParams, PtbnState,
};
use dsformer::training::{train_and_evaluate, Sampler, TrainConfig};
use dsformer::{Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spikes(shape: [usize; 4], p: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if r.random_bool(p) { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------- gradients

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut worst_all: f64 = 0.0;
    for mode in AttnMode::ALL {
        let c = ModelConfig {
            n_blocks: 2,
            d_model: 32,
            context_len: 8,
            snn_timesteps: 2,
            attn_mode: mode,
            window: 4,
            state_dim: 4,
            action_dim: 3,
            action_space: ActionSpace::Continuous,
            ..ModelConfig::default()
        };
        let m = Model::new(c.clone(), 11).unwrap();
        let mut r = rng(11);
        let x = Tensor::uniform([2, c.context_len, c.token_dim()], -1.5, 1.5, &mut r);
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        let mut coords = Vec::new();
        while coords.len() < 20 {
            let i = r.random_range(0..inputs.len());
            let j = r.random_range(0..inputs[i].len());
            if names[i].ends_with("/pos_bias") {
                // only in-window entries are parameters
                let n = c.context_len;
                let (row, col) = (j / n, j % n);
                if col > row || row - col >= c.window {
                    continue;
                }
            }
            coords.push((i, j));
        }
        let worst = check_coordinates(&inputs, &coords, 1e-5, |g, vars| {
            let mut mm = m.clone();
            mm.theta = 0.5;
            let mut ps = ParamStore::new();
            for (n, t) in names.iter().zip(&inputs) {
                ps.insert(n.clone(), t.clone());
            }
            mm.params = ps;
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let xv = g.constant(x.clone());
            let mut ctx = ForwardCtx {
                training: true,
                spike_mode: SpikeMode::Relaxed,
                ..ForwardCtx::default()
            };
            let y = mm.forward(g, &bound, xv, &mut ctx)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        worst_all = worst_all.max(worst);
        lines.push(format!("{mode} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_all < 1e-3 && secs < 60.0,
        format!("max relative error {} (limit 1e-3), {secs:.1}s", lines.join(", ")),
    )
}

// ---------------------------------------------------------------- neurons

fn spike_binarity_and_reset() -> Outcome {
    let mut runner = TestRunner::new(PropConfig::with_cases(1000));
    let strategy = (
        prop::collection::vec(-3.0f64..3.0, 1..32),
        prop::collection::vec(-2.0f64..2.0, 1..32),
        0.05f64..1.0,
        0.1f64..2.0,
        -1.0f64..0.09,
    );
    let result = runner.run(&strategy, |(input, membrane, gamma, u_th, u_reset)| {
        let n = input.len().min(membrane.len());
        let params = LifParams {
            gamma,
            u_th,
            u_reset: u_reset.min(u_th - 0.01),
            ..LifParams::default()
        };
        let x = Tensor::new([n], input[..n].to_vec()).unwrap();
        let state = LifState {
            membrane: Tensor::new([n], membrane[..n].to_vec()).unwrap(),
        };
        let (s, next) = lif_step(&x, &state, &params).unwrap();
        for k in 0..n {
            let v = s.data()[k];
            prop_assert!(v == 0.0 || v == 1.0);
            if v == 1.0 {
                prop_assert_eq!(next.membrane.data()[k], params.u_reset);
            }
        }
        Ok(())
    });
    check(result.is_ok(), match result {
        Ok(()) => "1000 random layers: outputs in {0, 1}, post-spike membranes equal u_reset".into(),
        Err(e) => format!("{e}"),
    })
}

// ---------------------------------------------------------------- attention

fn attn_cfg(mode: AttnMode, n: usize, t: usize, d: usize, heads: usize, window: usize) -> AttnConfig {
    AttnConfig {
        d_model: d,
        n_heads: heads,
        context_len: n,
        snn_timesteps: t,
        mode,
        window,
        attn_scale: 0.125,
    }
}

fn run_attention(mode: AttnMode, q: &Tensor, k: &Tensor, v: &Tensor, p: &PositionalBias, c: &AttnConfig) -> Tensor {
    match mode {
        AttnMode::Vla => vla_attention(q, k, v, c, true).unwrap(),
        AttnMode::Sssa => sssa_attention(q, k, v, c).unwrap(),
        AttnMode::Tssa => tssa_attention(q, k, v, c).unwrap(),
        AttnMode::Pssa => pssa_attention(q, k, v, p, c).unwrap(),
    }
}

/// Largest change at tokens `i` satisfying `affected(i, j)` when token `j` of
/// Q, K and V is redrawn, over every `j`.
fn perturbation_diff(mode: AttnMode, c: &AttnConfig, seed: u64, affected: impl Fn(usize, usize) -> bool) -> (f64, f64) {
    let mut r = rng(seed);
    let shape = [2, c.context_len, c.snn_timesteps, c.d_model];
    let draw = |r: &mut ChaCha8Rng| {
        if mode.is_spiking() {
            spikes(shape, 0.5, r)
        } else {
            Tensor::uniform(shape, -1.0, 1.0, r)
        }
    };
    let (q, k, v) = (draw(&mut r), draw(&mut r), draw(&mut r));
    let p = PositionalBias::init(c.context_len, c.window, &mut r);
    let base = run_attention(mode, &q, &k, &v, &p, c);
    let (mut outside, mut inside) = (0.0f64, 0.0f64);
    let per_token = c.snn_timesteps * c.d_model;
    for j in 0..c.context_len {
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for b in 0..2 {
            let off = (b * c.context_len + j) * per_token;
            for e in off..off + per_token {
                for t in [&mut q2, &mut k2, &mut v2] {
                    let x = &mut t.data_mut()[e];
                    *x = if mode.is_spiking() { 1.0 - *x } else { r.random_range(-3.0..3.0) };
                }
            }
        }
        let out = run_attention(mode, &q2, &k2, &v2, &p, c);
        for b in 0..2 {
            for i in 0..c.context_len {
                let off = (b * c.context_len + i) * per_token;
                let d = (off..off + per_token)
                    .map(|e| (out.data()[e] - base.data()[e]).abs())
                    .fold(0.0, f64::max);
                if affected(i, j) {
                    outside = outside.max(d);
                } else if i != j {
                    inside = inside.max(d);
                }
            }
        }
    }
    (outside, inside)
}

fn model_causality(mode: AttnMode) -> f64 {
    let c = ModelConfig {
        n_blocks: 2,
        d_model: 16,
        context_len: 8,
        snn_timesteps: 2,
        attn_mode: mode,
        window: 3,
        state_dim: 3,
        action_dim: 2,
        action_space: ActionSpace::Continuous,
        ..ModelConfig::default()
    };
    let mut m = Model::new(c.clone(), 5).unwrap();
    let mut r = rng(5);
    let x = Tensor::uniform([2, c.context_len, c.token_dim()], -1.5, 1.5, &mut r);
    let base = m.predict(&x).unwrap();
    let mut worst = 0.0f64;
    for j in 0..c.context_len {
        let mut x2 = x.clone();
        for f in 0..c.token_dim() {
            x2.set(&[0, j, f], r.random_range(-3.0..3.0));
        }
        let out = m.predict(&x2).unwrap();
        for i in 0..j {
            for a in 0..c.action_dim {
                worst = worst.max((out.at(&[0, i, a]) - base.at(&[0, i, a])).abs());
            }
        }
    }
    worst
}

fn causality() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in AttnMode::ALL {
        let c = attn_cfg(mode, 10, 3, 8, 2, 4);
        let (future, _) = perturbation_diff(mode, &c, 3, |i, j| i < j);
        let full = model_causality(mode);
        let limit = if mode.is_spiking() { 0.0 } else { 1e-12 };
        let pass = if mode.is_spiking() {
            future == 0.0 && full == 0.0
        } else {
            future < limit && full < limit
        };
        ok &= pass;
        parts.push(format!("{mode} attention {future:.1e} model {full:.1e}"));
    }
    check(ok, format!("max change at earlier tokens: {}", parts.join(", ")))
}

fn pssa_locality() -> Outcome {
    let c = attn_cfg(AttnMode::Pssa, 24, 2, 8, 1, 8);
    let (outside, inside) = perturbation_diff(AttnMode::Pssa, &c, 4, |i, j| i < j || i - j >= 8);
    check(
        outside == 0.0 && inside > 0.0,
        format!("S = 8: max change outside the window {outside:e}, inside {inside:.3}"),
    )
}

fn idx(s: &[usize], b: usize, i: usize, t: usize, c: usize) -> usize {
    ((b * s[1] + i) * s[2] + t) * s[3] + c
}

/// Loops straight from the definitions of the three spiking attentions.
fn oracle(mode: AttnMode, q: &Tensor, k: &Tensor, v: &Tensor, p: &Tensor, c: &AttnConfig) -> Tensor {
    let s = q.shape().to_vec();
    let dk = c.d_model / c.n_heads;
    let mut out = Tensor::zeros(s.clone());
    for b in 0..s[0] {
        for i in 0..s[1] {
            for t in 0..s[2] {
                for ch in 0..s[3] {
                    let head = ch / dk;
                    let o = idx(&s, b, i, t, ch);
                    out.data_mut()[o] = match mode {
                        AttnMode::Pssa => {
                            let mut acc = 0.0;
                            for j in 0..=i {
                                if i - j < c.window {
                                    let e = idx(&s, b, j, t, ch);
                                    acc += p.at(&[i, j]) * (k.data()[e] * v.data()[e]);
                                }
                            }
                            c.attn_scale * q.data()[o] * acc
                        }
                        _ => {
                            let steps: Vec<usize> = if mode == AttnMode::Sssa { vec![t] } else { (0..s[2]).collect() };
                            let mut acc = 0.0;
                            for j in 0..=i {
                                let mut a = 0.0;
                                for &tt in &steps {
                                    for cc in head * dk..(head + 1) * dk {
                                        a += q.data()[idx(&s, b, i, tt, cc)] * k.data()[idx(&s, b, j, tt, cc)];
                                    }
                                }
                                acc += a * v.data()[idx(&s, b, j, t, ch)];
                            }
                            c.attn_scale * acc
                        }
                    };
                }
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(6);
    let mut mismatches = 0;
    let mut t1_equal = true;
    for case in 0..50 {
        let n = r.random_range(1..=8);
        let t = r.random_range(1..=3);
        let heads = r.random_range(1..=2);
        let d = heads * r.random_range(1..=4);
        let window = r.random_range(1..=n);
        let shape = [r.random_range(1..=2), n, t, d];
        let (q, k, v) = (spikes(shape, 0.5, &mut r), spikes(shape, 0.5, &mut r), spikes(shape, 0.5, &mut r));
        let bias = PositionalBias::init(n, window, &mut r);
        for mode in [AttnMode::Sssa, AttnMode::Tssa, AttnMode::Pssa] {
            let c = attn_cfg(mode, n, t, d, heads, window);
            let got = run_attention(mode, &q, &k, &v, &bias, &c);
            if got != oracle(mode, &q, &k, &v, &bias.p, &c) {
                mismatches += 1;
                eprintln!("case {case} {mode}: mismatch");
            }
        }
        let s1 = [shape[0], n, 1, d];
        let (q1, k1, v1) = (spikes(s1, 0.5, &mut r), spikes(s1, 0.5, &mut r), spikes(s1, 0.5, &mut r));
        let c = attn_cfg(AttnMode::Sssa, n, 1, d, heads, window);
        let a = sssa_attention(&q1, &k1, &v1, &c).unwrap();
        let b = tssa_attention(&q1, &k1, &v1, &c).unwrap();
        t1_equal &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    check(
        mismatches == 0 && t1_equal,
        format!("150 instances, {mismatches} mismatches against loop references; TSSA at T = 1 bit-equal to SSSA: {t1_equal}"),
    )
}

// ---------------------------------------------------------------- entropy

fn temporal_entropy_property() -> Outcome {
    let mut r = rng(7);
    let (mut violations, mut dependent, mut strict) = (0, 0, 0);
    for _ in 0..100 {
        let t = r.random_range(2..=4);
        let elems = r.random_range(1..=(8 / t).max(1));
        let params = LifParams {
            gamma: r.random_range(0.2..1.0),
            u_th: r.random_range(0.5..1.5),
            ..LifParams::default()
        };
        let samples = 200;
        // a per-sample drive level plus per-step noise, through one LIF layer
        let mut drive = Tensor::zeros([t, samples, elems]);
        for s in 0..samples {
            for e in 0..elems {
                let level = r.random_range(0.0..1.2);
                for step in 0..t {
                    drive.set(&[step, s, e], level + r.random_range(-0.3..0.3));
                }
            }
        }
        let out = lif_sequence(&drive, &params).unwrap();
        let seqs: Vec<Vec<Vec<u8>>> = (0..samples)
            .map(|s| {
                (0..t)
                    .map(|step| (0..elems).map(|e| out.at(&[step, s, e]) as u8).collect())
                    .collect()
            })
            .collect();
        let rep = temporal_entropy(&seqs).unwrap();
        if rep.joint > rep.marginal_sum + 1e-12 {
            violations += 1;
        }
        if rep.dependent() {
            dependent += 1;
            if rep.joint < rep.marginal_sum - 1e-12 {
                strict += 1;
            }
        }
    }
    let frac = strict as f64 / dependent.max(1) as f64;
    check(
        violations == 0 && dependent > 0 && frac >= 0.95,
        format!("100 processes: {violations} violations of H(joint) <= sum H(marginals); strict in {strict}/{dependent} dependent cases"),
    )
}

// ---------------------------------------------------------------- PTBN

fn ptbn_contract() -> Outcome {
    // theta trace against 1 - t / T_p, zero afterwards
    let t_p = 37;
    let trace_ok = (0..=2 * t_p).all(|t| {
        let expected = if t >= t_p { 0.0 } else { (t_p - t) as f64 / t_p as f64 };
        theta_schedule(t_p, t).unwrap() == expected
    });
    let mut r = rng(8);
    let shape = [3, 5, 2, 6];
    let mut params = NormParams::new(6, 1.0, NormConfig::default());
    for v in params.lambda.data_mut() {
        *v = r.random_range(0.5..1.5);
    }
    for v in params.beta.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    for _ in 0..5 {
        let x = Tensor::uniform(shape, -2.0, 3.0, &mut r);
        tdbn_forward(&x, &mut params, true).unwrap();
    }
    let mut endpoints_ok = true;
    for training in [true, false] {
        let x = Tensor::uniform(shape, -2.0, 3.0, &mut r);
        let (mut a, mut b) = (params.clone(), params.clone());
        let one = ptbn_forward(&x, &mut a, &PtbnState::at(10, 0).unwrap(), training).unwrap();
        endpoints_ok &= one == tdln_forward(&x, &params).unwrap();
        let zero = ptbn_forward(&x, &mut a, &PtbnState::at(10, 10).unwrap(), training).unwrap();
        endpoints_ok &= zero == tdbn_forward(&x, &mut b, training).unwrap();
    }
    let state = PtbnState::at(10, 10).unwrap();
    let (din, dout) = (4, 6);
    let w = Tensor::uniform([din, dout], -1.0, 1.0, &mut r);
    let bias = Tensor::uniform([dout], -1.0, 1.0, &mut r);
    let (w2, b2) = fold_into_linear(&w, &bias, &params, &state).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::uniform([2, 3, 2, din], -2.0, 2.0, &mut r);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (wv, bv, w2v, b2v) = (
            g.constant(w.clone()),
            g.constant(bias.clone()),
            g.constant(w2.clone()),
            g.constant(b2.clone()),
        );
        let flat = g.reshape(xv, &[12, din]).unwrap();
        let h = g.matmul(flat, wv).unwrap();
        let h = g.add(h, bv).unwrap();
        let h = g.reshape(h, &[2, 3, 2, dout]).unwrap();
        let folded = g.matmul(flat, w2v).unwrap();
        let folded = g.add(folded, b2v).unwrap();
        let unfolded = tdbn_forward(g.value(h), &mut params.clone(), false).unwrap();
        let folded = g.value(folded).reshape([2, 3, 2, dout]).unwrap();
        worst = worst.max(unfolded.max_abs_diff(&folded).unwrap());
    }
    check(
        trace_ok && endpoints_ok && worst < 1e-9,
        format!("theta trace exact: {trace_ok}; endpoints bit-equal: {endpoints_ok}; folded vs unfolded max error {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- complexity

fn complexity_scaling() -> Outcome {
    let base = attn_cfg(AttnMode::Pssa, 16, 2, 8, 1, 8);
    let rows = bench_attention(&base, &AttnMode::ALL, &[16, 32, 64, 128], 1, 9).unwrap();
    let counts_ok = rows.iter().all(|r| r.counted == r.closed_form);
    let fits = fit_rows(&rows).unwrap();
    let exp = |m: AttnMode| fits.iter().find(|f| f.mode == m).unwrap().ops_exponent;
    let mut r = rng(10);
    let mut random_ok = true;
    for _ in 0..5 {
        let mode = AttnMode::ALL[r.random_range(0..4)];
        let n = r.random_range(1..=12);
        let heads = r.random_range(1..=2);
        let c = attn_cfg(mode, n, r.random_range(1..=3), heads * r.random_range(1..=3), heads, r.random_range(1..=n));
        let b = r.random_range(1..=3);
        let shape = [b, n, c.snn_timesteps, c.d_model];
        let (q, k, v) = (spikes(shape, 0.5, &mut r), spikes(shape, 0.5, &mut r), spikes(shape, 0.5, &mut r));
        let p = PositionalBias::init(n, c.window, &mut r).p;
        let (_, counted) = instrumented(&q, &k, &v, Some(&p), &c).unwrap();
        random_ok &= counted == count_attention_ops(&c, b);
    }
    let (pssa, tssa, sssa) = (exp(AttnMode::Pssa), exp(AttnMode::Tssa), exp(AttnMode::Sssa));
    check(
        counts_ok
            && random_ok
            && (0.9..=1.1).contains(&pssa)
            && (1.8..=2.2).contains(&tssa)
            && (1.8..=2.2).contains(&sssa),
        format!("exponents pssa {pssa:.3}, tssa {tssa:.3}, sssa {sssa:.3}; closed form equals counter: {}", counts_ok && random_ok),
    )
}

// ---------------------------------------------------------------- parity

fn parameter_parity() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (label, base) in [("default", ModelConfig::default()), ("desk", desk_model(AttnMode::Vla, 20))] {
        let count = |mode| {
            let c = ModelConfig { attn_mode: mode, ..base.clone() };
            Model::new(c, 0).unwrap().inference_parameter_count().unwrap()
        };
        let vla = count(AttnMode::Vla) as f64;
        for mode in [AttnMode::Tssa, AttnMode::Pssa] {
            let rel = (count(mode) as f64 - vla).abs() / vla;
            // the desk model is reported only; its positional table is large next to D = 32
            ok &= label == "desk" || rel < 0.01;
            parts.push(format!("{label} {mode} {:+.3}%", 100.0 * (count(mode) as f64 - vla) / vla));
        }
    }
    check(ok, format!("inference parameter counts relative to VLA (desk not gated): {}", parts.join(", ")))
}

// ---------------------------------------------------------------- learning

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_model(mode: AttnMode, context_len: usize) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        d_model: 32,
        context_len,
        snn_timesteps: 4,
        attn_mode: mode,
        window: 8,
        state_dim: 7,
        action_dim: 5,
        ..ModelConfig::default()
    }
}

fn desk_train(seed: u64, batch_size: usize, total_steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        batch_size,
        learning_rate: 1e-3,
        eval_every: total_steps,
        eval_episodes: 50,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Task {
    Dense,
    Sparse,
    Long,
}

fn dataset(task: Task) -> &'static Dataset {
    static CACHE: OnceLock<Mutex<BTreeMap<Task, &'static Dataset>>> = OnceLock::new();
    let mut map = CACHE.get_or_init(Default::default).lock().unwrap();
    map.entry(task)
        .or_insert_with(|| {
            let ds = match task {
                Task::Dense => gen_keydoor(500, 8, 56, Quality::Medium, false, 7),
                Task::Sparse => gen_keydoor(500, 8, 56, Quality::Medium, true, 7),
                // shortest episodes need 2 (G - 1) = 62 steps
                Task::Long => gen_keydoor(500, 32, 248, Quality::Medium, false, 7),
            };
            Box::leak(Box::new(ds.unwrap()))
        })
}

struct Run {
    score: f64,
    secs: f64,
    model: Model,
}

fn trained(task: Task, mode: AttnMode, context_len: usize, batch_size: usize, seed: u64) -> &'static Run {
    type Key = (Task, &'static str, usize, u64);
    static CACHE: OnceLock<Mutex<BTreeMap<Key, &'static Run>>> = OnceLock::new();
    let key = (task, mode.as_str(), context_len, seed);
    if let Some(run) = CACHE.get_or_init(Default::default).lock().unwrap().get(&key) {
        return run;
    }
    let ds = dataset(task);
    let start = Instant::now();
    let steps = if task == Task::Long { 2000 } else { 1000 };
    let train = desk_train(seed, batch_size, steps);
    let report = train_and_evaluate(&desk_model(mode, context_len), &train, ds, None, None).unwrap();
    let run: &'static Run = Box::leak(Box::new(Run {
        score: report.final_eval.mean_normalized,
        secs: start.elapsed().as_secs_f64(),
        model: report.model,
    }));
    CACHE.get().unwrap().lock().unwrap().insert(key, run);
    run
}

fn dense(mode: AttnMode, seed: u64) -> &'static Run {
    trained(Task::Dense, mode, 20, 32, seed)
}

fn desk_learning() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (mode, bar) in [(AttnMode::Pssa, 90.0), (AttnMode::Tssa, 85.0), (AttnMode::Vla, 85.0)] {
        let runs: Vec<&Run> = SEEDS.iter().map(|&s| dense(mode, s)).collect();
        ok &= runs.iter().all(|r| r.score >= bar && r.secs < 900.0);
        let scores: Vec<String> = runs.iter().map(|r| format!("{:.1}", r.score)).collect();
        let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
        parts.push(format!("{mode} [{}] (bar {bar}, slowest {slowest:.0}s)", scores.join(", ")));
    }
    check(ok, format!("KeyDoor dense normalized scores: {}", parts.join("; ")))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sparse_reward() -> Outcome {
    let dense: Vec<f64> = SEEDS.iter().map(|&s| dense(AttnMode::Pssa, s).score).collect();
    let sparse: Vec<f64> = SEEDS.iter().map(|&s| trained(Task::Sparse, AttnMode::Pssa, 20, 32, s).score).collect();
    let (d, s) = (mean(&dense), mean(&sparse));
    let rel = (s - d).abs() / d.abs();
    check(
        rel <= 0.10,
        format!("PSSA mean normalized score dense {d:.1}, sparse {s:.1}: {:.1}% apart (limit 10%)", 100.0 * rel),
    )
}

fn long_range() -> Outcome {
    let short: Vec<f64> = SEEDS.iter().map(|&s| trained(Task::Long, AttnMode::Pssa, 50, 16, s).score).collect();
    let long: Vec<f64> = SEEDS.iter().map(|&s| trained(Task::Long, AttnMode::Pssa, 100, 16, s).score).collect();
    let (a, b) = (mean(&short), mean(&long));
    check(
        b >= a - 5.0,
        format!("KeyDoor G = 32 PSSA mean normalized score N = 50 {a:.1}, N = 100 {b:.1} (limit 5 points below)"),
    )
}

fn energy_ordering() -> Outcome {
    let ds = dataset(Task::Dense);
    let batch = Sampler::new(ds, 20).unwrap().batch(64, &mut rng(12)).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let e = |mode| estimate_energy(&dense(mode, seed).model, &batch.tokens, &EnergyModel::default()).unwrap();
        let (p, t, v) = (e(AttnMode::Pssa), e(AttnMode::Tssa), e(AttnMode::Vla));
        ok &= p.attention_uj < t.attention_uj && t.attention_uj < v.attention_uj;
        parts.push(format!(
            "seed {seed}: pssa {:.4} < tssa {:.4} < vla {:.4} uJ (totals {:.3}, {:.3}, {:.3})",
            p.attention_uj, t.attention_uj, v.attention_uj, p.total_uj, t.total_uj, v.total_uj
        ));
    }
    check(ok, format!("attention energy per sample: {}", parts.join("; ")))
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("gradient correctness", gradient_correctness),
        ("spike binarity and reset", spike_binarity_and_reset),
        ("causality", causality),
        ("pssa locality", pssa_locality),
        ("oracle equivalence", oracle_equivalence),
        ("temporal entropy subadditivity", temporal_entropy_property),
        ("ptbn contract", ptbn_contract),
        ("complexity scaling", complexity_scaling),
        ("desk-scale learning", desk_learning),
        ("sparse-reward robustness", sparse_reward),
        ("long-range context", long_range),
        ("energy ordering", energy_ordering),
        ("parameter parity", parameter_parity),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f) in criteria {
        if filter.as_ref().is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
