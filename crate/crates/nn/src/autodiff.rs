//! Tape-based reverse-mode differentiation over dense row-major f64 tensors.
//!
//! Every op records its inputs on the [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse insertion order (a valid reverse topological order, since
//! inputs always precede outputs) and accumulates adjoints additively.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Conv1d { x: Var, w: Var, b: Option<Var>, pad: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Prelu { x: Var, a: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Mean { x: Var, outer: usize, dim: usize, inner: usize },
    MeanAll(Var),
    SumAll(Var),
    L1 { pred: Var, target: Var },
    Reshape(Var),
    Gather { x: Var, map: Vec<usize> },
    Concat { xs: Vec<Var>, outer: usize, inner: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c += a b` with `a: m x k`, `b: k x n`.
fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cj, bj) in ci.iter_mut().zip(bp) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c += a b^T` with `a: m x k`, `b: n x k`.
fn mm_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            c[i * n + j] += ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += a^T b` with `a: k x m`, `b: k x n`.
fn mm_at_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in ci.iter_mut().zip(bp) {
                *cj += api * bj;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * s).collect(),
        };
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        mm_acc(&mut data, &self.value(a).data, &self.value(b).data, m, k, n);
        let value = Tensor { shape: vec![m, n], data };
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `(g, m, k) x (g, k, n)`, or `(g, m, k) x (g, n, k)^T` when
    /// `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(NnError::shape("bmm", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut data = vec![0.0; g * m * n];
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        for i in 0..g {
            let c = &mut data[i * m * n..(i + 1) * m * n];
            let ai = &va[i * m * k..(i + 1) * m * k];
            let bi = &vb[i * k * n..(i + 1) * k * n];
            if transpose_b {
                mm_bt_acc(c, ai, bi, m, k, n);
            } else {
                mm_acc(c, ai, bi, m, k, n);
            }
        }
        let value = Tensor { shape: vec![g, m, n], data };
        Ok(self.push(value, Op::Bmm { a, b, g, m, k, n, transpose_b }, &[a, b]))
    }

    /// `x W^T + b` over the last axis; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sw[1] != *sx.last().unwrap() {
            return Err(NnError::shape("linear", &sx, &sw));
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(NnError::shape("linear bias", self.shape(b), &[out]));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut data = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for r in 0..rows {
                data[r * out..(r + 1) * out].copy_from_slice(bv);
            }
        }
        mm_bt_acc(&mut data, &self.value(x).data, &self.value(w).data, rows, inp, out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let value = Tensor { shape, data };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b, rows, inp, out }, &inputs))
    }

    /// Stride-1 convolution of `x: (B, Cin, L)` with `w: (Cout, Cin, K)` and
    /// `floor(K/2)` zeros on each side.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sw[2] == 0 {
            return Err(NnError::shape("conv1d", &sx, &sw));
        }
        let (bs, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(NnError::shape("conv1d bias", self.shape(b), &[co]));
            }
        }
        let pad = k / 2;
        if l + 2 * pad < k {
            return Err(NnError::shape("conv1d", &sx, &sw));
        }
        let lo = l + 2 * pad - k + 1;
        let mut data = vec![0.0; bs * co * lo];
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        for bi in 0..bs {
            for o in 0..co {
                let y = &mut data[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                if let Some(b) = b {
                    y.fill(self.nodes[b.0].value.data[o]);
                }
                for c in 0..ci {
                    let xr = &xv[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                    for kk in 0..k {
                        let wgt = wv[(o * ci + c) * k + kk];
                        let shift = kk as isize - pad as isize;
                        let t0 = (-shift).max(0) as usize;
                        let t1 = ((l as isize - shift).min(lo as isize)).max(0) as usize;
                        for t in t0..t1 {
                            y[t] += wgt * xr[(t as isize + shift) as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor { shape: vec![bs, co, lo], data };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, pad }, &inputs))
    }

    /// Non-overlapping max over windows of `window` along the last axis of
    /// `(B, C, L)`; a trailing partial window is dropped.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || window == 0 {
            return Err(NnError::shape("maxpool1d", &sx, &[window]));
        }
        let (rows, l) = (sx[0] * sx[1], sx[2]);
        let lo = l / window;
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(rows * lo);
        let mut argmax = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let base = r * l + t * window;
                let mut best = base;
                for i in base + 1..base + window {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                data.push(xv[best]);
                argmax.push(best);
            }
        }
        let value = Tensor { shape: vec![sx[0], sx[1], lo], data };
        Ok(self.push(value, Op::MaxPool1d { x, argmax }, &[x]))
    }

    /// Per-channel PReLU, channels on axis 1.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(a) != [sx[1]] {
            return Err(NnError::shape("prelu", &sx, self.shape(a)));
        }
        let (outer, c, inner) = split_axis(&sx, 1);
        let xv = &self.value(x).data;
        let av = &self.value(a).data;
        let mut data = xv.clone();
        for o in 0..outer {
            for ch in 0..c {
                for v in &mut data[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                    if *v < 0.0 {
                        *v *= av[ch];
                    }
                }
            }
        }
        let value = Tensor { shape: sx, data };
        Ok(self.push(value, Op::Prelu { x, a }, &[x, a]))
    }

    /// Batch norm over `(B, C, L)` per channel. Train mode normalizes with
    /// batch statistics and updates `stats`; eval mode uses `stats` only.
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats, train: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(NnError::shape("batchnorm1d", &sx, self.shape(gamma)));
        }
        let (bs, c, l) = (sx[0], sx[1], sx[2]);
        if stats.running_mean.len() != c || stats.running_var.len() != c {
            return Err(NnError::shape("batchnorm1d stats", &[c], &[stats.running_mean.len()]));
        }
        let n = bs * l;
        let xv = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            if n < 2 {
                return Err(NnError::shape("batchnorm1d (train needs > 1 value per channel)", &sx, &[n]));
            }
            for b in 0..bs {
                for ch in 0..c {
                    mean[ch] += xv[(b * c + ch) * l..(b * c + ch + 1) * l].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for b in 0..bs {
                for ch in 0..c {
                    var[ch] += xv[(b * c + ch) * l..(b * c + ch + 1) * l]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            for ch in 0..c {
                stats.running_mean[ch] = (1.0 - BN_MOMENTUM) * stats.running_mean[ch] + BN_MOMENTUM * mean[ch];
                let unbiased = var[ch] * n as f64 / (n - 1) as f64;
                stats.running_var[ch] = (1.0 - BN_MOMENTUM) * stats.running_var[ch] + BN_MOMENTUM * unbiased;
            }
        } else {
            mean.copy_from_slice(&stats.running_mean);
            var.copy_from_slice(&stats.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut data = vec![0.0; xv.len()];
        for b in 0..bs {
            for ch in 0..c {
                for t in 0..l {
                    let i = (b * c + ch) * l + t;
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    data[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let value = Tensor { shape: sx, data };
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            &[x, gamma, beta],
        ))
    }

    /// Normalization over the last axis with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| NnError::shape("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NnError::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / d;
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor { shape: sx, data };
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| f(*a)).collect(),
        };
        self.push(value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| NnError::shape("softmax", &sx, &[]))?;
        let xv = &self.value(x).data;
        let mut data = vec![0.0; xv.len()];
        for (row, out) in xv.chunks(d.max(1)).zip(data.chunks_mut(d.max(1))) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        }
        let value = Tensor { shape: sx, data };
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(NnError::shape("mean", &sx, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&sx, axis);
        let xv = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    data[o * inner + i] += xv[(o * dim + d) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= dim as f64);
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Mean { x, outer, dim, inner }, &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// `mean |pred - target|`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.numel().max(1) as f64;
        let s = p.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L1 { pred, target }, &[pred, target]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(NnError::shape("reshape", &v.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let xv = &self.value(x).data;
        let data = map.iter().map(|&i| xv[i]).collect();
        let value = Tensor { shape, data };
        self.push(value, Op::Gather { x, map }, &[x])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::shape("permute", &sx, perm));
        }
        let mut in_strides = vec![1; sx.len()];
        for i in (0..sx.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * sx[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = out_shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(self.gather(x, out_shape, map))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(NnError::shape("narrow", &sx, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&sx, axis);
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for d in start..start + len {
                let base = (o * dim + d) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.gather(x, shape, map))
    }

    /// Concatenation along `axis`; other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| NnError::shape("concat", &[], &[]))?)
            .to_vec();
        if axis >= first.len() {
            return Err(NnError::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NnError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let src = &self.value(v).data[o * d * inner..(o + 1) * d * inner];
                data.extend_from_slice(src);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), outer, inner }, xs))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value.data;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let n = self.nodes[v.0].value.numel();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(slot);
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| mm_bt_acc(s, g, vb, *m, *n, *k));
                acc(*b, &mut |s| mm_at_acc(s, va, g, *k, *m, *n));
            }
            Op::Bmm { a, b, g: groups, m, k, n, transpose_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |s| {
                    for i in 0..*groups {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let si = &mut s[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            mm_acc(si, gi, bi, m, n, k);
                        } else {
                            mm_bt_acc(si, gi, bi, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..*groups {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            mm_at_acc(si, gi, ai, n, m, k);
                        } else {
                            mm_at_acc(si, ai, gi, k, m, n);
                        }
                    }
                });
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |s| mm_acc(s, g, vw, *rows, *out, *inp));
                acc(*w, &mut |s| mm_at_acc(s, g, vx, *out, *rows, *inp));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for r in 0..*rows {
                            for j in 0..*out {
                                s[j] += g[r * out + j];
                            }
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, pad } => {
                let sx = &self.nodes[x.0].value.shape;
                let sw = &self.nodes[w.0].value.shape;
                let (bs, ci, l) = (sx[0], sx[1], sx[2]);
                let (co, k) = (sw[0], sw[2]);
                let lo = out.shape[2];
                let (vx, vw) = (val(*x), val(*w));
                let range = |kk: usize| {
                    let shift = kk as isize - *pad as isize;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((l as isize - shift).min(lo as isize)).max(0) as usize;
                    (shift, t0, t1)
                };
                acc(*x, &mut |s| {
                    for bi in 0..bs {
                        for o in 0..co {
                            let gy = &g[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                            for c in 0..ci {
                                let sr = &mut s[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                                for kk in 0..k {
                                    let wgt = vw[(o * ci + c) * k + kk];
                                    let (shift, t0, t1) = range(kk);
                                    for t in t0..t1 {
                                        sr[(t as isize + shift) as usize] += wgt * gy[t];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for bi in 0..bs {
                        for o in 0..co {
                            let gy = &g[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                            for c in 0..ci {
                                let xr = &vx[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                                for kk in 0..k {
                                    let (shift, t0, t1) = range(kk);
                                    let mut sum = 0.0;
                                    for t in t0..t1 {
                                        sum += gy[t] * xr[(t as isize + shift) as usize];
                                    }
                                    s[(o * ci + c) * k + kk] += sum;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for bi in 0..bs {
                            for o in 0..co {
                                s[o] += g[(bi * co + o) * lo..(bi * co + o + 1) * lo].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::MaxPool1d { x, argmax } => acc(*x, &mut |s| {
                for (i, &src) in argmax.iter().enumerate() {
                    s[src] += g[i];
                }
            }),
            Op::Prelu { x, a } => {
                let sx = &self.nodes[x.0].value.shape;
                let (outer, c, inner) = split_axis(sx, 1);
                let (vx, va) = (val(*x), val(*a));
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for ch in 0..c {
                            for i in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                                s[i] += if vx[i] < 0.0 { va[ch] * g[i] } else { g[i] };
                            }
                        }
                    }
                });
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for ch in 0..c {
                            for i in (o * c + ch) * inner..(o * c + ch + 1) * inner {
                                if vx[i] < 0.0 {
                                    s[ch] += vx[i] * g[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let sx = &self.nodes[x.0].value.shape;
                let (bs, c, l) = (sx[0], sx[1], sx[2]);
                let n = (bs * l) as f64;
                let vg = val(*gamma);
                let idx = |b: usize, ch: usize, t: usize| (b * c + ch) * l + t;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..bs {
                    for ch in 0..c {
                        for t in 0..l {
                            let i = idx(b, ch, t);
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v));
                acc(*x, &mut |s| {
                    for b in 0..bs {
                        for ch in 0..c {
                            for t in 0..l {
                                let i = idx(b, ch, t);
                                s[i] += if *train {
                                    vg[ch] * inv_std[ch] / n * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    vg[ch] * inv_std[ch] * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = val(*gamma).len();
                let rows = inv_std.len();
                let vg = val(*gamma);
                acc(*gamma, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * vg[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let i = r * d + j;
                            s[i] += inv_std[r] * (g[i] * vg[j] - m1 - xhat[i] * m2);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    let y = out.data[i];
                    s[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    let y = out.data[i];
                    s[i] += g[i] * (1.0 - y * y);
                }
            }),
            Op::Softmax(x) => {
                let d = (*out.shape.last().unwrap()).max(1);
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(d).zip(out.data.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for j in 0..sr.len() {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Mean { x, outer, dim, inner } => acc(*x, &mut |s| {
                for o in 0..*outer {
                    for d in 0..*dim {
                        for i in 0..*inner {
                            s[(o * dim + d) * inner + i] += g[o * inner + i] / *dim as f64;
                        }
                    }
                }
            }),
            Op::MeanAll(x) => acc(*x, &mut |s| {
                let k = g[0] / s.len().max(1) as f64;
                s.iter_mut().for_each(|v| *v += k);
            }),
            Op::SumAll(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::L1 { pred, target } => {
                let (vp, vt) = (val(*pred), val(*target));
                let n = vp.len().max(1) as f64;
                let sign = |i: usize| {
                    let d = vp[i] - vt[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*pred, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * sign(i) / n;
                    }
                });
                if wants(*target) {
                    acc(*target, &mut |s| {
                        for i in 0..s.len() {
                            s[i] -= g[0] * sign(i) / n;
                        }
                    });
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Gather { x, map } => acc(*x, &mut |s| {
                for (i, &src) in map.iter().enumerate() {
                    s[src] += g[i];
                }
            }),
            Op::Concat { xs, outer, inner } => {
                let axis_len: usize = out.data.len() / (outer * inner).max(1);
                let mut offset = 0;
                for &v in xs {
                    let d = self.nodes[v.0].value.numel() / (outer * inner).max(1);
                    acc(v, &mut |s| {
                        for o in 0..*outer {
                            let src = &g[(o * axis_len + offset) * inner..(o * axis_len + offset + d) * inner];
                            for (a, b) in s[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                    offset += d;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Adam,
}

pub const RMSPROP_ALPHA: f64 = 0.99;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const OPT_EPS: f64 = 1e-8;

/// Per-parameter optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            kind,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::shape("optimizer_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape != g.shape {
                return Err(NnError::shape("optimizer_step", &p.shape, &g.shape));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            match self.kind {
                OptimizerKind::Rmsprop => {
                    for j in 0..p.numel() {
                        let gj = g.data[j];
                        v[j] = RMSPROP_ALPHA * v[j] + (1.0 - RMSPROP_ALPHA) * gj * gj;
                        p.data[j] -= lr * gj / (v[j].sqrt() + OPT_EPS);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = ADAM_BETAS;
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for j in 0..p.numel() {
                        let gj = g.data[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + OPT_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
