//! Dense matrix kernels on row-major slices.
//!
//! Mostly-zero left operands (binary spike inputs) take zero-skipping loops
//! whose cost scales with the number of active elements; dense operands take
//! a register-blocked kernel. Both sum over the reduction index in order, so
//! the path taken does not change results.

/// Below this fraction of nonzero left-operand entries the zero-skipping
/// loops beat the blocked kernel.
const SPARSE_DENSITY: f64 = 0.3;

fn is_sparse(a: &[f64]) -> bool {
    let nnz = a.iter().filter(|v| **v != 0.0).count();
    (nnz as f64) < SPARSE_DENSITY * a.len() as f64
}

/// `out[rows×cols] += A · b` where `A(r, p) = a[r*sr + p*sp]` and `b` is
/// `[red × cols]` row-major. Each output accumulates over `p` in order in a
/// register tile before being added to `out`.
fn gemm_blocked(a: &[f64], sr: usize, sp: usize, b: &[f64], out: &mut [f64], rows: usize, red: usize, cols: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i + MR <= rows {
        let mut j = 0;
        while j + NR <= cols {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..red {
                let brow = &b[p * cols + j..p * cols + j + NR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * sr + p * sp];
                    for c in 0..NR {
                        accr[c] += av * brow[c];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                for (o, v) in out[(i + r) * cols + j..(i + r) * cols + j + NR].iter_mut().zip(accr) {
                    *o += v;
                }
            }
            j += NR;
        }
        for r in i..i + MR {
            gemm_row(a, r, sr, sp, b, &mut out[r * cols..(r + 1) * cols], red, cols, j);
        }
        i += MR;
    }
    for r in i..rows {
        gemm_row(a, r, sr, sp, b, &mut out[r * cols..(r + 1) * cols], red, cols, 0);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_row(a: &[f64], r: usize, sr: usize, sp: usize, b: &[f64], orow: &mut [f64], red: usize, cols: usize, from: usize) {
    for start in (from..cols).step_by(8) {
        let w = (cols - start).min(8);
        let mut acc = [0.0f64; 8];
        for p in 0..red {
            let av = a[r * sr + p * sp];
            for (o, &bv) in acc[..w].iter_mut().zip(&b[p * cols + start..p * cols + start + w]) {
                *o += av * bv;
            }
        }
        for (o, v) in orow[start..start + w].iter_mut().zip(&acc[..w]) {
            *o += v;
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !is_sparse(a) {
        return gemm_blocked(a, k, 1, b, out, m, k, n);
    }
    let mut acc = vec![0.0; n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        acc.fill(0.0);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        for (o, v) in orow.iter_mut().zip(&acc) {
            *o += v;
        }
    }
}

/// `out[k×n] += aᵀ · g` with `a[m×k]`, `g[m×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if !is_sparse(a) {
        return gemm_blocked(a, 1, k, g, out, k, m, n);
    }
    let mut acc = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    for (o, v) in out.iter_mut().zip(acc) {
        *o += v;
    }
}

/// `out[m×k] += g · bᵀ` with `g[m×n]`, `b[k×n]`.
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for q in 0..n {
            bt[q * k + p] = b[p * n + q];
        }
    }
    gemm_blocked(g, n, 1, &bt, out, m, n, k);
}
