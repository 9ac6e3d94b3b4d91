//! Attention cores over contiguous `[N, C]` buffers.
//!
//! Every forward kernel reports each scalar addition and multiplication to an
//! [`Ops`] sink, so the instrumented counts come from the same loops that
//! produce the outputs. Divisions count as multiplications and subtractions as
//! additions; `exp`, `max` and comparisons are not counted.

use serde::Serialize;

pub trait Ops {
    fn mul(&mut self);
    fn add(&mut self);
}

/// Sink that discards counts.
pub struct NoCount;

impl Ops for NoCount {
    #[inline(always)]
    fn mul(&mut self) {}

    #[inline(always)]
    fn add(&mut self) {}
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub adds: u64,
    pub muls: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.adds + self.muls
    }
}

impl Ops for OpCount {
    #[inline]
    fn mul(&mut self) {
        self.muls += 1;
    }

    #[inline]
    fn add(&mut self) {
        self.adds += 1;
    }
}

/// First key index inside the causal window of query `i`.
#[inline]
pub(crate) fn window_start(i: usize, window: usize) -> usize {
    (i + 1).saturating_sub(window)
}

/// `out = scale * mask(q kᵀ) v` with `mask` keeping `j <= i`.
pub(crate) fn linear_forward<O: Ops>(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize, scale: f64, out: &mut [f64], ops: &mut O) {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for x in 0..c {
                s += q[i * c + x] * k[j * c + x];
                ops.mul();
                ops.add();
            }
            a[i * n + j] = s;
        }
    }
    out[..n * c].fill(0.0);
    for i in 0..n {
        let row = &mut out[i * c..(i + 1) * c];
        for j in 0..=i {
            let aij = a[i * n + j];
            for (o, &vv) in row.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *o += aij * vv;
                ops.mul();
                ops.add();
            }
        }
        for o in row.iter_mut() {
            *o *= scale;
            ops.mul();
        }
    }
}

/// Causal co-activation map `A_ij = q_i · k_j` for `j <= i`, zero above the diagonal.
pub(crate) fn coactivation(q: &[f64], k: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            a[i * n + j] = dot(&q[i * c..(i + 1) * c], &k[j * c..(j + 1) * c]);
        }
    }
    a
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Gradients of [`linear_forward`] accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    scale: f64,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let a = coactivation(q, k, n, c);
    for i in 0..n {
        let gi = &g[i * c..(i + 1) * c];
        for j in 0..=i {
            let vj = &v[j * c..(j + 1) * c];
            axpy(scale * a[i * n + j], gi, &mut dv[j * c..(j + 1) * c]);
            let da = scale * dot(gi, vj);
            if da != 0.0 {
                axpy(da, &k[j * c..(j + 1) * c], &mut dq[i * c..(i + 1) * c]);
                axpy(da, &q[i * c..(i + 1) * c], &mut dk[j * c..(j + 1) * c]);
            }
        }
    }
}

/// Row-wise softmax attention probabilities, `[N, N]`, zero where masked.
fn softmax_probs<O: Ops>(q: &[f64], k: &[f64], n: usize, c: usize, causal: bool, ops: &mut O) -> Vec<f64> {
    let inv = 1.0 / (c as f64).sqrt();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let lim = if causal { i + 1 } else { n };
        let row = &mut p[i * n..i * n + lim];
        for (j, r) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for x in 0..c {
                s += q[i * c + x] * k[j * c + x];
                ops.mul();
                ops.add();
            }
            *r = s * inv;
            ops.mul();
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            ops.add();
            z += *r;
            ops.add();
        }
        for r in row.iter_mut() {
            *r /= z;
            ops.mul();
        }
    }
    p
}

/// `out = softmax(q kᵀ / sqrt(c) + mask) v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn softmax_forward<O: Ops>(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize, causal: bool, out: &mut [f64], ops: &mut O) {
    let p = softmax_probs(q, k, n, c, causal, ops);
    out[..n * c].fill(0.0);
    for i in 0..n {
        let lim = if causal { i + 1 } else { n };
        let row = &mut out[i * c..(i + 1) * c];
        for j in 0..lim {
            let pij = p[i * n + j];
            for (o, &vv) in row.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *o += pij * vv;
                ops.mul();
                ops.add();
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn softmax_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    causal: bool,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let inv = 1.0 / (c as f64).sqrt();
    let p = softmax_probs(q, k, n, c, causal, &mut NoCount);
    let mut dp = vec![0.0; n];
    for i in 0..n {
        let lim = if causal { i + 1 } else { n };
        let gi = &g[i * c..(i + 1) * c];
        let mut inner = 0.0;
        for j in 0..lim {
            let pij = p[i * n + j];
            axpy(pij, gi, &mut dv[j * c..(j + 1) * c]);
            dp[j] = dot(gi, &v[j * c..(j + 1) * c]);
            inner += pij * dp[j];
        }
        for j in 0..lim {
            let ds = p[i * n + j] * (dp[j] - inner) * inv;
            axpy(ds, &k[j * c..(j + 1) * c], &mut dq[i * c..(i + 1) * c]);
            axpy(ds, &q[i * c..(i + 1) * c], &mut dk[j * c..(j + 1) * c]);
        }
    }
}

/// Positional element-wise attention for one batch item.
///
/// `out_i = scale * q_i ⊙ Σ_{j in window(i)} P_ij (k_j ⊙ v_j)` where `p` is the
/// row-major `[p_stride, p_stride]` bias matrix (only its leading `n × n` block
/// is read).
#[allow(clippy::too_many_arguments)]
pub(crate) fn pssa_forward<O: Ops>(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    p: &[f64],
    p_stride: usize,
    n: usize,
    c: usize,
    window: usize,
    scale: f64,
    out: &mut [f64],
    ops: &mut O,
) {
    let mut kv = vec![0.0; n * c];
    for ((o, &a), &b) in kv.iter_mut().zip(&k[..n * c]).zip(&v[..n * c]) {
        *o = a * b;
        ops.mul();
    }
    let mut acc = vec![0.0; c];
    for i in 0..n {
        acc.fill(0.0);
        for j in window_start(i, window)..=i {
            let pij = p[i * p_stride + j];
            for (a, &x) in acc.iter_mut().zip(&kv[j * c..(j + 1) * c]) {
                *a += pij * x;
                ops.mul();
                ops.add();
            }
        }
        for x in 0..c {
            out[i * c + x] = scale * (q[i * c + x] * acc[x]);
            ops.mul();
            ops.mul();
        }
    }
}

/// Gradients of [`pssa_forward`]; `dp` is accumulated (shape of `p`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn pssa_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    p: &[f64],
    p_stride: usize,
    g: &[f64],
    n: usize,
    c: usize,
    window: usize,
    scale: f64,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    dp: &mut [f64],
) {
    let kv: Vec<f64> = k[..n * c].iter().zip(&v[..n * c]).map(|(a, b)| a * b).collect();
    let mut dkv = vec![0.0; n * c];
    let mut u = vec![0.0; c];
    let mut du = vec![0.0; c];
    for i in 0..n {
        u.fill(0.0);
        let lo = window_start(i, window);
        for j in lo..=i {
            axpy(p[i * p_stride + j], &kv[j * c..(j + 1) * c], &mut u);
        }
        for x in 0..c {
            let gx = scale * g[i * c + x];
            dq[i * c + x] += gx * u[x];
            du[x] = gx * q[i * c + x];
        }
        for j in lo..=i {
            dp[i * p_stride + j] += dot(&du, &kv[j * c..(j + 1) * c]);
            axpy(p[i * p_stride + j], &du, &mut dkv[j * c..(j + 1) * c]);
        }
    }
    for x in 0..n * c {
        dk[x] += dkv[x] * v[x];
        dv[x] += dkv[x] * k[x];
    }
}
