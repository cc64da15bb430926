//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Nodes are appended in
//! execution order, so the node vector is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(usize),
    SliceLast {
        x: usize,
        start: usize,
    },
    ConcatLast(Vec<usize>),
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    Minimum(usize, usize),
    Maximum(usize, usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    L1(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: usize,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::SliceLast { .. } => "slice_last",
            Op::ConcatLast(..) => "concat_last",
            Op::SelectRows { .. } => "select_rows",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Dropout { .. } => "dropout",
            Op::L1(..) => "l1_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives. Confined to one thread; build one per
/// forward pass.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// Graph without model parameters, in evaluation mode.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Enables training-mode behaviour (dropout) with a seeded mask stream.
    pub fn train(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; receives no gradient contribution downstream.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a model parameter.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.get(id).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `x` into a new constant leaf.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, op, rg)
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x.0);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a.0, b.0), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a.0, b.0), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a.0, b.0), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Div(a.0, b.0), a, b, |x, y| x / y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Minimum(a.0, b.0), a, b, f64::min)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Maximum(a.0, b.0), a, b, f64::max)
    }

    /// `x + bias` with `bias` broadcast along every leading axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x.0) || self.rg(bias.0);
        self.push(value, Op::AddRow(x.0, bias.0), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(Op::Scale(x.0, s), x, |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(Op::AddScalar(x.0), x, |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Relu(x.0), x, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Sigmoid(x.0), x, kernels::sigmoid)
    }

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// equal, or one operand must be a plain matrix that is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_ok = ba == bb || ba.is_empty() || bb.is_empty();
        if k != k2 || !batch_ok {
            return Err(Error::shape("matmul", sa, sb));
        }
        let lead = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let batch: usize = lead.iter().product();
        let (step_a, step_b) = (
            if ba.is_empty() { 0 } else { m * k },
            if bb.is_empty() { 0 } else { k * n },
        );
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for t in 0..batch {
            kernels::matmul_acc(
                &da[t * step_a..t * step_a + m * k],
                &db[t * step_b..t * step_b + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a.0, b.0), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0.0; self.value(x).len()];
        for (src, dst) in self.data(x).chunks(r * c).zip(out.chunks_mut(r * c)) {
            kernels::transpose_into(src, dst, r, c);
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, out), Op::Transpose(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        self.push(value, Op::Reshape(x.0), rg)
    }

    /// Numerically stable softmax (max subtraction) along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", &s, &[axis]));
        }
        let (outer, len, inner) = kernels::axis_split(&s, axis);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mx = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(s, out), Op::Softmax { x: x.0, axis }, rg)
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        let (g, b) = (self.data(gain), self.data(bias));
        for (r, row) in self.data(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.value(x).cols();
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_last", self.shape(x), &[start, len]));
        }
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, data), Op::SliceLast { x: x.0, start }, rg)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|x| self.rg(x.0));
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatLast(xs.iter().map(|x| x.0).collect()),
            rg,
        )
    }

    /// Gathers rows of a `[rows, cols]` view of `x`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("select_rows", t.shape(), rows));
        }
        let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        let shape = vec![rows.len(), t.cols()];
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(shape, data),
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x.0);
        self.push(value, Op::Dropout { x: x.0, mask }, rg)
    }

    /// `sum |a - b|`. The subgradient at `a == b` is 0.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::scalar(s), Op::L1(a.0, b.0), rg)
    }

    /// Softmax cross entropy of `[n, c]` logits against class indices,
    /// returning `sum_i weights[i] * CE_i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n || weights.len() != n || targets.iter().any(|&k| k >= c) {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, row) in t.data().chunks(c).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += weights[i] * (lse - row[targets[i]]);
        }
        let rg = self.rg(logits.0);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Elementwise binary cross entropy on logits, summed.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("sigmoid_bce", self.shape(logits), targets.shape()));
        }
        let s = self
            .data(logits)
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits.0);
        self.push(
            Tensor::scalar(s),
            Op::SigmoidBce {
                logits: logits.0,
                targets: targets.data().to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}",
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |j: usize| self.nodes[j].value.data();
        let out = self.nodes[i].value.data();
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let len = self.nodes[j].value.len();
                grads[j].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.rg(a) {
                    kernels::axpy(acc!(a), g, 1.0);
                }
                if self.rg(b) {
                    kernels::axpy(acc!(b), g, 1.0);
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    kernels::axpy(acc!(a), g, 1.0);
                }
                if self.rg(b) {
                    kernels::axpy(acc!(b), g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = val(b);
                    for (d, (gg, y)) in acc!(a).iter_mut().zip(g.iter().zip(vb)) {
                        *d += gg * y;
                    }
                }
                if self.rg(b) {
                    let va = val(a);
                    for (d, (gg, x)) in acc!(b).iter_mut().zip(g.iter().zip(va)) {
                        *d += gg * x;
                    }
                }
            }
            &Op::Div(a, b) => {
                let vb = val(b);
                if self.rg(a) {
                    for (d, (gg, y)) in acc!(a).iter_mut().zip(g.iter().zip(vb)) {
                        *d += gg / y;
                    }
                }
                if self.rg(b) {
                    for (k, d) in acc!(b).iter_mut().enumerate() {
                        *d -= g[k] * out[k] / vb[k];
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if self.rg(x) {
                    kernels::axpy(acc!(x), g, 1.0);
                }
                if self.rg(b) {
                    let gb = acc!(b);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        kernels::axpy(gb, row, 1.0);
                    }
                }
            }
            &Op::Scale(x, s) => kernels::axpy(acc!(x), g, s),
            &Op::AddScalar(x) | &Op::Reshape(x) => kernels::axpy(acc!(x), g, 1.0),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = g.len() / (m * n);
                let step_a = if sa.len() == 2 { 0 } else { m * k };
                let step_b = if sb.len() == 2 { 0 } else { k * n };
                if self.rg(a) {
                    let vb = val(b);
                    let ga = acc!(a);
                    for t in 0..batch {
                        kernels::matmul_bt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &vb[t * step_b..t * step_b + k * n],
                            &mut ga[t * step_a..t * step_a + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.rg(b) {
                    let va = val(a);
                    let gb = acc!(b);
                    for t in 0..batch {
                        kernels::matmul_at_acc(
                            &va[t * step_a..t * step_a + m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * step_b..t * step_b + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Transpose(x) => {
                let s = self.nodes[i].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let gx = acc!(x);
                for (src, dst) in g.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                    let mut tmp = vec![0.0; r * c];
                    kernels::transpose_into(src, &mut tmp, r, c);
                    kernels::axpy(dst, &tmp, 1.0);
                }
            }
            &Op::Relu(x) => {
                for (d, (gg, y)) in acc!(x).iter_mut().zip(g.iter().zip(out)) {
                    if *y > 0.0 {
                        *d += gg;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                for (d, (gg, y)) in acc!(x).iter_mut().zip(g.iter().zip(out)) {
                    *d += gg * y * (1.0 - y);
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(self.nodes[i].value.shape(), axis);
                let gx = acc!(x);
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * len * inner + c;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * out[base + j * inner]).sum();
                        for j in 0..len {
                            let k = base + j * inner;
                            gx[k] += out[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.nodes[*gain].value.len();
                let gv = val(*gain);
                if self.rg(*gain) {
                    let gg = acc!(*gain);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc!(*bias);
                    for grow in g.chunks(n) {
                        kernels::axpy(gb, grow, 1.0);
                    }
                }
                if self.rg(*x) {
                    let gx = acc!(*x);
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] / nf * (nf * dh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                acc!(x).iter_mut().for_each(|d| *d += g0);
            }
            &Op::SliceLast { x, start } => {
                let len = self.nodes[i].value.cols();
                let cols = self.nodes[x].value.cols();
                let gx = acc!(x);
                for (r, row) in g.chunks(len).enumerate() {
                    kernels::axpy(&mut gx[r * cols + start..r * cols + start + len], row, 1.0);
                }
            }
            Op::ConcatLast(xs) => {
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x].value.cols();
                    if self.rg(x) {
                        let gx = acc!(x);
                        for (r, row) in g.chunks(total).enumerate() {
                            kernels::axpy(&mut gx[r * c..(r + 1) * c], &row[offset..offset + c], 1.0);
                        }
                    }
                    offset += c;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = self.nodes[*x].value.cols();
                let gx = acc!(*x);
                for (k, &r) in rows.iter().enumerate() {
                    kernels::axpy(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                }
            }
            &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
                let is_min = matches!(self.nodes[i].op, Op::Minimum(..));
                let (va, vb) = (val(a), val(b));
                // ties route the gradient to `a`
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                if self.rg(a) {
                    for (k, d) in acc!(a).iter_mut().enumerate() {
                        if pick_a[k] {
                            *d += g[k];
                        }
                    }
                }
                if self.rg(b) {
                    for (k, d) in acc!(b).iter_mut().enumerate() {
                        if !pick_a[k] {
                            *d += g[k];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for (d, (gg, m)) in acc!(*x).iter_mut().zip(g.iter().zip(mask)) {
                    *d += gg * m;
                }
            }
            &Op::L1(a, b) => {
                let g0 = g[0];
                let sign: Vec<f64> = val(a)
                    .iter()
                    .zip(val(b))
                    .map(|(x, y)| if x > y { g0 } else if x < y { -g0 } else { 0.0 })
                    .collect();
                if self.rg(a) {
                    kernels::axpy(acc!(a), &sign, 1.0);
                }
                if self.rg(b) {
                    kernels::axpy(acc!(b), &sign, -1.0);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.nodes[*logits].value.cols();
                let g0 = g[0];
                let gl = acc!(*logits);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += g0 * w * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let g0 = g[0];
                let x = val(*logits).to_vec();
                for (k, d) in acc!(*logits).iter_mut().enumerate() {
                    *d += g0 * (kernels::sigmoid(x[k]) - targets[k]);
                }
            }
        }
        Ok(())
    }
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                kernels::axpy(store.get_mut(id).grad.data_mut(), g, 1.0);
            }
        }
    }
}
