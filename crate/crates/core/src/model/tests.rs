use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_coordinates;

fn small(mode: AttnMode) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        d_model: 8,
        context_len: 6,
        snn_timesteps: 2,
        n_heads: 2,
        attn_mode: mode,
        window: 3,
        mlp_ratio: 2,
        state_dim: 3,
        action_dim: 2,
        action_space: ActionSpace::Continuous,
        ..ModelConfig::default()
    }
}

fn tokens(c: &ModelConfig, b: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform([b, c.context_len, c.token_dim()], -1.5, 1.5, r)
}

/// Push the PTBN layers to tdBN and give them non-trivial statistics.
fn settle(m: &mut Model, r: &mut ChaCha8Rng) {
    m.theta = 0.0;
    let c = m.config.clone();
    for _ in 0..3 {
        let x = tokens(&c, 4, r);
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let xv = g.constant(x);
        m.forward(&mut g, &p, xv, &mut ForwardCtx::training()).unwrap();
    }
    for (n, t) in m.params.iter_mut() {
        if n.ends_with("/lambda") || n.ends_with("/beta") {
            for v in t.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
    }
}

#[test]
fn zero_embedding_weights_give_position_embedding() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 1).unwrap();
    m.params.insert("embed/w", Tensor::zeros([c.token_dim(), c.d_model]));
    let mut g = Graph::inference();
    let p = m.bind(&mut g);
    let x = g.constant(Tensor::zeros([2, c.context_len, c.token_dim()]));
    let mut ctx = ForwardCtx::inference();
    let mut r = Runner {
        cfg: &m.config,
        stats: &mut m.stats,
        theta: 1.0,
        folded: false,
        p: &p,
        g: &mut g,
        ctx: &mut ctx,
    };
    let e = r.linear("embed", x).unwrap();
    let pos = r.p.var("pos").unwrap();
    let e = r.g.add(e, pos).unwrap();
    let pos = m.params.get("pos").unwrap();
    for b in 0..2 {
        let row = &g.value(e).data()[b * pos.len()..(b + 1) * pos.len()];
        assert_eq!(row, pos.data());
    }
}

#[test]
fn embedding_is_per_token() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = tokens(&c, 1, &mut rng);
    let mut x2 = x.clone();
    x2.set(&[0, 3, 1], 9.0);
    let embed = |m: &mut Model, x: &Tensor| {
        let mut g = Graph::inference();
        let p = m.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::inference();
        let mut r = Runner {
            cfg: &m.config,
            stats: &mut m.stats,
            theta: 1.0,
            folded: false,
            p: &p,
            g: &mut g,
            ctx: &mut ctx,
        };
        let e = r.linear("embed", xv).unwrap();
        g.value(e).clone()
    };
    let (a, b) = (embed(&mut m, &x), embed(&mut m, &x2));
    assert_eq!(a.shape(), [1, c.context_len, c.d_model]);
    for n in 0..c.context_len {
        let same = (0..c.d_model).all(|d| a.at(&[0, n, d]) == b.at(&[0, n, d]));
        assert_eq!(same, n != 3, "token {n}");
    }
}

#[test]
fn repeat_gradient_sums_over_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform([2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let ev = g.param(e);
    let rep = g.repeat_axis(ev, 2, 3).unwrap();
    for t in 0..3 {
        let a = g.narrow(rep, 2, t, 1).unwrap();
        let b = g.narrow(rep, 2, 0, 1).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
    let wv = g.constant(w.clone());
    let y = g.mul(rep, wv).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let grad = g.grad(ev).unwrap();
    for b in 0..2 {
        for n in 0..3 {
            for d in 0..4 {
                let want: f64 = (0..3).map(|t| w.at(&[b, n, t, d])).sum();
                assert!((grad.at(&[b, n, d]) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn zero_sublayer_weights_make_block_identity() {
    let c = small(AttnMode::Tssa);
    let mut m = Model::new(c.clone(), 4).unwrap();
    for name in ["blk0/o/w", "blk0/fc2/w"] {
        let shape = m.params.get(name).unwrap().shape().to_vec();
        m.params.insert(name, Tensor::zeros(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform([2, c.context_len, c.snn_timesteps, c.d_model], -2.0, 2.0, &mut rng);
    let mut g = Graph::inference();
    let p = m.bind(&mut g);
    let xv = g.constant(x.clone());
    let mut ctx = ForwardCtx::inference();
    let mut r = Runner {
        cfg: &m.config,
        stats: &mut m.stats,
        theta: 0.0,
        folded: false,
        p: &p,
        g: &mut g,
        ctx: &mut ctx,
    };
    let y = r.spiking_block(0, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn output_shapes_and_readout() {
    for mode in AttnMode::ALL {
        let c = small(mode);
        let mut m = Model::new(c.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = m.predict(&tokens(&c, 3, &mut rng)).unwrap();
        assert_eq!(y.shape(), [3, c.context_len, c.action_dim]);
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
    }
    // mean over T equals an explicit sum / T
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let r = g.reduce(xv, &[2], ReduceOp::Mean).unwrap();
    for b in 0..2 {
        for n in 0..3 {
            for d in 0..5 {
                let s: f64 = (0..4).map(|t| x.at(&[b, n, t, d])).sum::<f64>() / 4.0;
                assert!((g.value(r).at(&[b, n, d]) - s).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn zero_head_gives_zero_action() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 7).unwrap();
    m.params.insert("head/w", Tensor::zeros([c.d_model, c.action_dim]));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = m.predict(&tokens(&c, 2, &mut rng)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn same_seed_same_outputs() {
    let c = small(AttnMode::Pssa);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = tokens(&c, 2, &mut rng);
    let a = Model::new(c.clone(), 11).unwrap().predict(&x).unwrap();
    let b = Model::new(c.clone(), 11).unwrap().predict(&x).unwrap();
    let d = Model::new(c, 12).unwrap().predict(&x).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, d);
}

#[test]
fn end_to_end_causality() {
    for mode in AttnMode::ALL {
        let c = small(mode);
        let mut m = Model::new(c.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        settle(&mut m, &mut rng);
        let x = tokens(&c, 2, &mut rng);
        let base = m.predict(&x).unwrap();
        for j in 0..c.context_len {
            let mut x2 = x.clone();
            for f in 0..c.token_dim() {
                x2.set(&[0, j, f], rng.random_range(-3.0..3.0));
            }
            let out = m.predict(&x2).unwrap();
            for i in 0..j {
                for a in 0..c.action_dim {
                    let diff = (out.at(&[0, i, a]) - base.at(&[0, i, a])).abs();
                    if mode.is_spiking() {
                        assert_eq!(diff, 0.0, "{mode} i={i} j={j}");
                    } else {
                        assert!(diff < 1e-12, "{mode} i={i} j={j}");
                    }
                }
            }
            // the other batch item is untouched
            for i in 0..c.context_len {
                assert_eq!(out.at(&[1, i, 0]), base.at(&[1, i, 0]));
            }
        }
    }
}

#[test]
fn all_neuron_outputs_are_binary() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ctx = ForwardCtx {
        record_rates: true,
        ..ForwardCtx::inference()
    };
    m.predict_with(&tokens(&c, 4, &mut rng), &mut ctx).unwrap();
    assert_eq!(ctx.non_binary, 0);
    assert_eq!(ctx.rates.len(), 2 * 8);
    assert!(ctx.rates.values().all(|r| (0.0..=1.0).contains(&r.rate())));
    assert!(ctx.rates.values().any(|r| r.ones > 0));
}

#[test]
fn folded_matches_unfolded_inference() {
    for mode in [AttnMode::Sssa, AttnMode::Tssa, AttnMode::Pssa, AttnMode::Vla] {
        let c = small(mode);
        let mut m = Model::new(c.clone(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        settle(&mut m, &mut rng);
        let mut folded = m.clone();
        folded.fold().unwrap();
        assert!(folded.is_folded());
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let x = tokens(&c, 2, &mut rng);
            let a = m.predict(&x).unwrap();
            let b = folded.predict(&x).unwrap();
            worst = worst.max(a.max_abs_diff(&b).unwrap());
        }
        assert!(worst < 1e-9, "{mode}: {worst}");
    }
}

#[test]
fn folded_matches_training_forward_with_batch_stats() {
    let mut c = small(AttnMode::Pssa);
    c.norm.momentum = 1.0;
    let mut m = Model::new(c.clone(), 13).unwrap();
    m.theta = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = tokens(&c, 3, &mut rng);
    let mut g = Graph::new();
    let p = m.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = m.forward(&mut g, &p, xv, &mut ForwardCtx::training()).unwrap();
    let train_out = g.value(y).clone();
    m.fold().unwrap();
    let folded = m.predict(&x).unwrap();
    assert!(train_out.max_abs_diff(&folded).unwrap() < 1e-9);
}

#[test]
fn fold_requires_theta_zero() {
    let mut m = Model::new(small(AttnMode::Pssa), 14).unwrap();
    m.theta = 0.25;
    assert!(matches!(m.fold(), Err(Error::Contract(_))));
    let mut v = Model::new(small(AttnMode::Vla), 14).unwrap();
    v.fold().unwrap();
}

#[test]
fn folded_model_refuses_training() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 15).unwrap();
    m.theta = 0.0;
    m.fold().unwrap();
    let mut g = Graph::new();
    let p = m.bind(&mut g);
    let x = g.constant(Tensor::zeros([1, c.context_len, c.token_dim()]));
    assert!(m.forward(&mut g, &p, x, &mut ForwardCtx::training()).is_err());
}

#[test]
fn parameter_parity_at_default_size() {
    let base = ModelConfig::default();
    let vla = Model::new(ModelConfig { attn_mode: AttnMode::Vla, ..base.clone() }, 0).unwrap();
    let reference = vla.inference_parameter_count().unwrap() as f64;
    for mode in [AttnMode::Tssa, AttnMode::Pssa] {
        let m = Model::new(ModelConfig { attn_mode: mode, ..base.clone() }, 0).unwrap();
        let n = m.inference_parameter_count().unwrap() as f64;
        let rel = (n - reference).abs() / reference;
        assert!(rel < 0.01, "{mode}: {n} vs {reference}");
    }
}

#[test]
fn pssa_bias_counts_in_window_entries_only() {
    let c = small(AttnMode::Pssa);
    let m = Model::new(c.clone(), 0).unwrap();
    let t = Model::new(small(AttnMode::Tssa), 0).unwrap();
    let w = PositionalBias::effective_len(c.context_len, c.window);
    assert_eq!(m.parameter_count(), t.parameter_count() + c.n_blocks * w);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    settle(&mut m, &mut rng);
    let x = tokens(&c, 2, &mut rng);
    for fold in [false, true] {
        if fold {
            m.fold().unwrap();
        }
        let ck = m.to_checkpoint(serde_json::json!({"step": 7})).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck.is_folded(), fold);
        let (mut back, extra) = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(extra["step"], 7);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }
}

#[test]
fn projection_matches_separate_modules() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let s = Tensor::from_fn([2, c.context_len, c.snn_timesteps, c.d_model], |_| f64::from(rng.random::<bool>()));
    let mut g = Graph::inference();
    let p = m.bind(&mut g);
    let sv = g.constant(s.clone());
    let mut ctx = ForwardCtx::inference();
    let mut stats = m.stats.clone();
    let mut r = Runner {
        cfg: &m.config,
        stats: &mut stats,
        theta: 0.0,
        folded: false,
        p: &p,
        g: &mut g,
        ctx: &mut ctx,
    };
    let q = r.projection(0, "q", sv).unwrap();
    let q = g.value(q).clone();
    assert!(q.is_binary());

    let mut g2 = Graph::inference();
    let (w, b) = (m.params.get("blk0/q/w").unwrap(), m.params.get("blk0/q/b").unwrap());
    let rows = s.len() / c.d_model;
    let x = g2.constant(s.reshape([rows, c.d_model]).unwrap());
    let (wv, bv) = (g2.constant(w.clone()), g2.constant(b.clone()));
    let h = g2.matmul(x, wv).unwrap();
    let h = g2.add(h, bv).unwrap();
    let h = g2.value(h).reshape(s.shape().to_vec()).unwrap();
    let mut np = m.norm_params("blk0/q_norm").unwrap();
    let h = norm::tdbn_forward(&h, &mut np, false).unwrap();
    let mut g3 = Graph::inference();
    let hv = g3.constant(h);
    let want = lif(&mut g3, hv, 2, &c.lif, SpikeMode::Spike).unwrap();
    assert_eq!(&q, g3.value(want));

    // zero weights and bias never reach threshold
    m.params.insert("blk0/q/w", Tensor::zeros([c.d_model, c.d_model]));
    let mut g4 = Graph::inference();
    let p4 = m.bind(&mut g4);
    let sv = g4.constant(s);
    let mut ctx = ForwardCtx::inference();
    let mut r = Runner {
        cfg: &m.config,
        stats: &mut m.stats,
        theta: 0.0,
        folded: false,
        p: &p4,
        g: &mut g4,
        ctx: &mut ctx,
    };
    let q = r.projection(0, "q", sv).unwrap();
    assert!(g4.value(q).data().iter().all(|&v| v == 0.0));
}

#[test]
fn surrogate_gradient_reaches_query_weights() {
    let c = small(AttnMode::Pssa);
    let mut m = Model::new(c.clone(), 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = tokens(&c, 4, &mut rng);
    let mut g = Graph::new();
    let p = m.bind(&mut g);
    let xv = g.constant(x);
    let y = m.forward(&mut g, &p, xv, &mut ForwardCtx::training()).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let gq = g.grad(p.var("blk0/q/w").unwrap()).unwrap();
    assert!(gq.sq_norm() > 0.0);
}

#[test]
fn relaxed_gradients_match_finite_differences() {
    for mode in AttnMode::ALL {
        let c = ModelConfig {
            n_blocks: 1,
            d_model: 4,
            context_len: 4,
            n_heads: 1,
            window: 2,
            ..small(mode)
        };
        let m = Model::new(c.clone(), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = tokens(&c, 2, &mut rng);
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        let mut coords = Vec::new();
        for _ in 0..12 {
            let i = rng.random_range(0..inputs.len());
            let mut j = rng.random_range(0..inputs[i].len());
            if names[i].ends_with("/pos_bias") {
                j = 0;
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
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(worst < 1e-4, "{mode}: {worst}");
    }
}
