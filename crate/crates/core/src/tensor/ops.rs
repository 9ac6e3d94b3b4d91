use super::graph::{Function, Graph, Var};
use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population (biased) variance.
    Var,
    Max,
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = Tensor::zeros([self.m, self.k]);
        matmul_nt_acc(grad.data(), b.data(), ga.data_mut(), self.m, self.k, self.n);
        let mut gb = Tensor::zeros([self.k, self.n]);
        matmul_tn_acc(a.data(), grad.data(), gb.data_mut(), self.m, self.k, self.n);
        vec![Some(ga), Some(gb)]
    }
}

/// Broadcasting layout: the smaller operand's shape is a trailing suffix of
/// the larger one and is tiled `repeats` times.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs is tiled over the leading axes of lhs
    Rhs,
    /// lhs is tiled over the leading axes of rhs
    Lhs,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if a.len() >= b.len() && a.ends_with(b) {
        Some(Broadcast::Rhs)
    } else if b.len() > a.len() && b.ends_with(a) {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

struct Binary {
    op: BinaryOp,
}

/// `f` over `n` output elements, tiling the smaller operand per `kind`.
#[inline]
fn tiled(a: &[f64], b: &[f64], n: usize, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match kind {
        Broadcast::Same => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        Broadcast::Rhs if !b.is_empty() => {
            for chunk in a.chunks(b.len()) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        Broadcast::Lhs if !a.is_empty() => {
            for chunk in b.chunks(a.len()) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => {}
    }
    out
}

fn reduce_tiles(g: &[f64], small: usize) -> Tensor {
    let mut out = vec![0.0; small];
    for chunk in g.chunks(small.max(1)) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor { shape: vec![small], data: out }
}

impl Function for Binary {
    fn name(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.data();
        // full-size gradients first, then fold the broadcast operand
        let (ga_full, gb_full): (Vec<f64>, Vec<f64>) = match self.op {
            BinaryOp::Add => (g.to_vec(), g.to_vec()),
            BinaryOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            BinaryOp::Mul => {
                let n = g.len();
                let mul = |x: f64, y: f64| x * y;
                let kb = if b.len() == n { Broadcast::Same } else { Broadcast::Rhs };
                let ka = if a.len() == n { Broadcast::Same } else { Broadcast::Rhs };
                (tiled(g, b.data(), n, kb, mul), tiled(g, a.data(), n, ka, mul))
            }
        };
        let fold = |full: Vec<f64>, t: &Tensor| -> Tensor {
            if full.len() == t.len() {
                Tensor {
                    shape: t.shape().to_vec(),
                    data: full,
                }
            } else {
                let mut r = reduce_tiles(&full, t.len());
                r.shape = t.shape().to_vec();
                r
            }
        };
        vec![Some(fold(ga_full, a)), Some(fold(gb_full, b))]
    }
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct Identity;

impl Function for Identity {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

struct Tanh;

impl Function for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(y, g)| g * (1.0 - y * y))
            .collect();
        vec![Some(Tensor {
            shape: output.shape().to_vec(),
            data,
        })]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct Gelu;

impl Function for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, g)| g * gelu_grad(x))
            .collect();
        vec![Some(Tensor {
            shape: x.shape().to_vec(),
            data,
        })]
    }
}

/// Maps every input element to its output slot for an axis reduction.
struct ReducePlan {
    out_shape: Vec<usize>,
    out_index: Vec<usize>,
    count: usize,
}

fn reduce_plan(shape: &[usize], axes: &[usize]) -> Result<ReducePlan> {
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::dim(format!(
                "reduction axis {a} out of range for shape {shape:?}"
            )));
        }
    }
    let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let count = axes.iter().map(|&a| shape[a]).product::<usize>().max(1);
    let in_strides = strides(shape);
    let mut out_index = Vec::with_capacity(n);
    for flat in 0..n {
        let mut o = 0;
        for (ki, &d) in keep.iter().enumerate() {
            let idx = (flat / in_strides[d]) % shape[d];
            o += idx * out_strides[ki];
        }
        out_index.push(o);
    }
    Ok(ReducePlan {
        out_shape,
        out_index,
        count,
    })
}

struct Reduce {
    op: ReduceOp,
    plan: ReducePlan,
    /// per-output mean (Var) or argmax input position (Max)
    aux: Vec<f64>,
}

impl Function for Reduce {
    fn name(&self) -> &'static str {
        "reduce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let g = grad.data();
        let idx = &self.plan.out_index;
        let n = self.plan.count as f64;
        let data: Vec<f64> = match self.op {
            ReduceOp::Sum => idx.iter().map(|&o| g[o]).collect(),
            ReduceOp::Mean => idx.iter().map(|&o| g[o] / n).collect(),
            ReduceOp::Var => idx
                .iter()
                .zip(x.data())
                .map(|(&o, &v)| g[o] * 2.0 * (v - self.aux[o]) / n)
                .collect(),
            ReduceOp::Max => idx
                .iter()
                .enumerate()
                .map(|(i, &o)| if self.aux[o] as usize == i { g[o] } else { 0.0 })
                .collect(),
        };
        vec![Some(Tensor {
            shape: x.shape().to_vec(),
            data,
        })]
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor {
            shape: self.shape.clone(),
            data: grad.data().to_vec(),
        })]
    }
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let o: usize = idx.iter().zip(&src).map(|(i, s)| i * s).sum();
        data.push(x.data()[o]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

struct Permute {
    inverse: Vec<usize>,
}

impl Function for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(permute_data(grad, &self.inverse))]
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

struct Concat {
    axis: usize,
    sizes: Vec<usize>,
}

impl Function for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (outer, inner) = outer_inner(output.shape(), self.axis);
        let total: usize = self.sizes.iter().sum();
        let mut grads: Vec<Vec<f64>> = self.sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
        for o in 0..outer {
            let mut start = o * total * inner;
            for (gi, &s) in grads.iter_mut().zip(&self.sizes) {
                gi.extend_from_slice(&grad.data()[start..start + s * inner]);
                start += s * inner;
            }
        }
        grads
            .into_iter()
            .zip(inputs)
            .map(|(data, x)| {
                Some(Tensor {
                    shape: x.shape().to_vec(),
                    data,
                })
            })
            .collect()
    }
}

struct Narrow {
    axis: usize,
    start: usize,
    len: usize,
}

impl Function for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (outer, inner) = outer_inner(x.shape(), self.axis);
        let size = x.shape()[self.axis];
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            let dst = (o * size + self.start) * inner;
            let src = o * self.len * inner;
            data[dst..dst + self.len * inner].copy_from_slice(&grad.data()[src..src + self.len * inner]);
        }
        vec![Some(Tensor {
            shape: x.shape().to_vec(),
            data,
        })]
    }
}

struct RepeatAxis {
    axis: usize,
    times: usize,
}

impl Function for RepeatAxis {
    fn name(&self) -> &'static str {
        "repeat_axis"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let outer: usize = x.shape()[..self.axis].iter().product();
        let inner: usize = x.shape()[self.axis..].iter().product();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for t in 0..self.times {
                let src = &grad.data()[(o * self.times + t) * inner..(o * self.times + t + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        vec![Some(Tensor {
            shape: x.shape().to_vec(),
            data,
        })]
    }
}

impl Graph {
    /// Matrix product of two rank-2 values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        Ok(self.apply(&[a, b], out, MatMul { m, k, n }))
    }

    /// Elementwise op with trailing-dimension broadcasting: the smaller
    /// operand's shape must be a suffix of the larger one.
    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let kind = broadcast_kind(&sa, &sb)
            .ok_or_else(|| Error::dim(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (out_shape, n) = match kind {
            Broadcast::Lhs => (sb.clone(), vb.len()),
            _ => (sa.clone(), va.len()),
        };
        let data = match op {
            BinaryOp::Add => tiled(va, vb, n, kind, |x, y| x + y),
            BinaryOp::Sub => tiled(va, vb, n, kind, |x, y| x - y),
            BinaryOp::Mul => tiled(va, vb, n, kind, |x, y| x * y),
        };
        let out = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.apply(&[a, b], out, Binary { op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.apply(&[a], out, Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.apply(&[a], out, Identity)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.apply(&[a], out, Tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.apply(&[a], out, Gelu)
    }

    pub fn reduce(&mut self, a: Var, axes: &[usize], op: ReduceOp) -> Result<Var> {
        let x = self.value(a);
        let plan = reduce_plan(x.shape(), axes)?;
        let m: usize = plan.out_shape.iter().product();
        let n = plan.count as f64;
        let mut out = vec![0.0; m];
        let mut aux = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (&o, &v) in plan.out_index.iter().zip(x.data()) {
                    out[o] += v;
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v /= n);
                }
            }
            ReduceOp::Var => {
                // two passes: mean, then centered squares
                let mut mean = vec![0.0; m];
                for (&o, &v) in plan.out_index.iter().zip(x.data()) {
                    mean[o] += v;
                }
                mean.iter_mut().for_each(|v| *v /= n);
                for (&o, &v) in plan.out_index.iter().zip(x.data()) {
                    let d = v - mean[o];
                    out[o] += d * d;
                }
                out.iter_mut().for_each(|v| *v /= n);
                aux = mean;
            }
            ReduceOp::Max => {
                out = vec![f64::NEG_INFINITY; m];
                aux = vec![0.0; m];
                for (i, (&o, &v)) in plan.out_index.iter().zip(x.data()).enumerate() {
                    if v > out[o] {
                        out[o] = v;
                        aux[o] = i as f64;
                    }
                }
            }
        }
        let value = Tensor {
            shape: plan.out_shape.clone(),
            data: out,
        };
        Ok(self.apply(&[a], value, Reduce { op, plan, aux }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, ReduceOp::Sum).expect("all axes are valid")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, ReduceOp::Mean).expect("all axes are valid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", x.shape())));
        }
        let old = x.shape().to_vec();
        let out = Tensor {
            shape: shape.to_vec(),
            data: x.data().to_vec(),
        };
        Ok(self.apply(&[a], out, Reshape { shape: old }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.ndim()];
        if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for shape {:?}", x.shape())));
        }
        let out = permute_data(x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.apply(&[a], out, Permute { inverse }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} does not match {base:?} off axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &s) in xs.iter().zip(&sizes) {
                data.extend_from_slice(&self.value(x).data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor { shape, data };
        Ok(self.apply(xs, out, Concat { axis, sizes }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let size = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * size + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.apply(&[a], out, Narrow { axis, start, len }))
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::dim(format!("split sizes {sizes:?} do not tile axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Insert a new axis at `axis` holding `times` copies of the input.
    pub fn repeat_axis(&mut self, a: Var, axis: usize, times: usize) -> Result<Var> {
        let x = self.value(a);
        if axis > x.ndim() || times == 0 {
            return Err(Error::dim(format!(
                "repeat_axis({axis}, {times}) invalid for {:?}",
                x.shape()
            )));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(x.len() * times);
        for o in 0..outer {
            let block = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..times {
                data.extend_from_slice(block);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.insert(axis, times);
        let out = Tensor { shape, data };
        Ok(self.apply(&[a], out, RepeatAxis { axis, times }))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_gradients;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let m = Tensor::uniform([3, 3], -1.0, 1.0, &mut rng());
        let i = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let p = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(p), &m);

        let a = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a = Tensor::uniform([4, 5], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([5, 3], -1.0, 1.0, &mut r);
        let w = Tensor::uniform([4, 3], -1.0, 1.0, &mut r);
        let worst = check_gradients(&[a, b], 1e-4, |g, xs| {
            let p = g.matmul(xs[0], xs[1])?;
            let wv = g.constant(w.clone());
            let q = g.mul(p, wv)?;
            Ok(g.sum(q))
        })
        .unwrap();
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::new();
        let a = Tensor::uniform([2, 3], -1.0, 1.0, &mut rng());
        let av = g.param(a.clone());
        let ones = g.constant(Tensor::ones([2, 3]));
        let p = g.mul(av, ones).unwrap();
        assert_eq!(g.value(p), &a);

        let zeros = g.constant(Tensor::zeros([2, 3]));
        let z = g.mul(av, zeros).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert!(g.grad(av).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_matches_explicit_tiling() {
        let mut r = rng();
        let x = Tensor::uniform([4, 3], -1.0, 1.0, &mut r);
        let v = Tensor::uniform([3], -1.0, 1.0, &mut r);
        let tiled = Tensor::from_fn([4, 3], |i| v.data()[i % 3]);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            let mut g = Graph::new();
            let (xa, va, ta) = (g.constant(x.clone()), g.constant(v.clone()), g.constant(tiled.clone()));
            let b = g.binary(xa, va, op).unwrap();
            let e = g.binary(xa, ta, op).unwrap();
            assert_eq!(g.value(b), g.value(e));
        }
        let worst = check_gradients(&[x, v], 1e-4, |g, xs| {
            let p = g.mul(xs[0], xs[1])?;
            let q = g.sub(p, xs[1])?;
            let q2 = g.mul(q, q)?;
            Ok(g.sum(q2))
        })
        .unwrap();
        assert!(worst < 1e-4);
    }

    #[test]
    fn non_broadcastable_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn reductions_match_two_pass_reference() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([3, 4], 2.5));
        let m = g.reduce(c, &[0, 1], ReduceOp::Mean).unwrap();
        let v = g.reduce(c, &[1], ReduceOp::Var).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.5);
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));

        let x = Tensor::uniform([3, 5, 4], -1.0, 1.0, &mut rng());
        let xv = g.constant(x.clone());
        let mean = g.reduce(xv, &[1], ReduceOp::Mean).unwrap();
        let var = g.reduce(xv, &[1], ReduceOp::Var).unwrap();
        for a in 0..3 {
            for c in 0..4 {
                let vals: Vec<f64> = (0..5).map(|b| x.at(&[a, b, c])).collect();
                let mu = vals.iter().sum::<f64>() / 5.0;
                let s2 = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0;
                assert!((g.value(mean).at(&[a, c]) - mu).abs() < 1e-6);
                assert!((g.value(var).at(&[a, c]) - s2).abs() < 1e-6);
            }
        }
        assert!(matches!(g.reduce(xv, &[3], ReduceOp::Sum), Err(Error::Dimension(_))));
    }

    #[test]
    fn reduction_gradients() {
        let x = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng());
        for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Var, ReduceOp::Max] {
            let worst = check_gradients(&[x.clone()], 1e-4, |g, xs| {
                let r = g.reduce(xs[0], &[1], op)?;
                let r2 = g.mul(r, r)?;
                Ok(g.sum(r2))
            })
            .unwrap();
            assert!(worst < 1e-4, "{op:?}: {worst}");
        }
    }

    #[test]
    fn concat_split_round_trip_and_gradient() {
        let mut r = rng();
        let a = Tensor::uniform([2, 3, 2], -1.0, 1.0, &mut r);
        let b = Tensor::uniform([2, 1, 2], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat(&[av, bv], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 2]);
        let parts = g.split(c, 1, &[3, 1]).unwrap();
        assert_eq!(g.value(parts[0]), &a);
        assert_eq!(g.value(parts[1]), &b);
        assert!(g.split(c, 1, &[3, 2]).is_err());

        let w = Tensor::uniform([2, 4, 2], -1.0, 1.0, &mut r);
        let worst = check_gradients(&[a, b], 1e-4, |g, xs| {
            let c = g.concat(xs, 1)?;
            let wv = g.constant(w.clone());
            let p = g.mul(c, wv)?;
            let p2 = g.mul(p, p)?;
            Ok(g.sum(p2))
        })
        .unwrap();
        assert!(worst < 1e-4);
    }

    #[test]
    fn permute_and_repeat_gradients() {
        let mut r = rng();
        let x = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform([4, 2, 3], -1.0, 1.0, &mut r);
        let worst = check_gradients(&[x.clone()], 1e-4, |g, xs| {
            let p = g.permute(xs[0], &[2, 0, 1])?;
            let wv = g.constant(w.clone());
            let q = g.mul(p, wv)?;
            let q = g.tanh(q);
            Ok(g.sum(q))
        })
        .unwrap();
        assert!(worst < 1e-4);

        let w2 = Tensor::uniform([2, 3, 5, 4], -1.0, 1.0, &mut r);
        let worst = check_gradients(&[x], 1e-4, |g, xs| {
            let p = g.repeat_axis(xs[0], 2, 5)?;
            let wv = g.constant(w2.clone());
            let q = g.mul(p, wv)?;
            let q = g.gelu(q);
            Ok(g.sum(q))
        })
        .unwrap();
        assert!(worst < 1e-4);
    }
}
