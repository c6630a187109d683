//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! insertion order is already a topological order. [`Graph::backward`] walks
//! the list once in reverse and accumulates gradients into each parent. A node
//! that feeds several consumers simply receives several contributions.
//!
//! Leaves created with [`Graph::constant`] never receive gradient, and neither
//! does anything computed only from constants.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyTarget {
    /// `‖M − I‖_F²`
    Identity,
    /// `‖M‖_F²`
    Zero,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulConst(Var, Tensor),
    Relu(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
    GradReversal(Var, f64),
    Frobenius(Var, PenaltyTarget),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        probs: Vec<Tensor>,
    },
    TokenMeanPool(Var, usize),
    Reshape(Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, zeros if nothing reached this node.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds a `1×m` row vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "add_row: row {:?} against matrix {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let m = xv.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % m];
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Same row-major data viewed with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = Tensor::new(rows, cols, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stops gradient flow: forward identity, backward nothing.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    /// Mean over rows of `−log softmax(logits)[i, labels[i]]` for two-class logits.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy expects n×2 logits, got {:?}",
                lv.shape()
            )));
        }
        if lv.rows() != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "cross_entropy: {} rows vs {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::domain(format!("label {bad} outside {{0,1}}")));
        }
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Identity forward; the backward pass multiplies incoming gradient by `−scale`.
    pub fn gradient_reversal(&mut self, x: Var, scale: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::GradReversal(x, scale), rg)
    }

    pub fn frobenius_penalty(&mut self, m: Var, target: PenaltyTarget) -> Result<Var> {
        let mv = self.value(m);
        let value = match target {
            PenaltyTarget::Identity => {
                if mv.rows() != mv.cols() {
                    return Err(Error::shape(format!(
                        "identity target needs a square matrix, got {:?}",
                        mv.shape()
                    )));
                }
                mv.sub(&Tensor::identity(mv.rows()))?.frobenius_sq()
            }
            PenaltyTarget::Zero => mv.frobenius_sq(),
        };
        let rg = self.rg(m);
        Ok(self.push(Tensor::scalar(value), Op::Frobenius(m, target), rg))
    }

    /// Row-wise layer normalization with a `1×m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.shape() != [1, m] || bv.shape() != [1, m] {
            return Err(Error::shape("layer_norm gain/bias must be 1×cols"));
        }
        let mut xhat = Tensor::zeros(xv.rows(), m);
        let mut out = Tensor::zeros(xv.rows(), m);
        let mut inv_std = Vec::with_capacity(xv.rows());
        #[allow(clippy::needless_range_loop)]
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..m {
                let h = (row[j] - mu) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Single-head scaled dot-product self-attention. Rows are grouped into
    /// consecutive blocks of `tokens` rows, one block per sample; attention
    /// never crosses a block boundary.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.rows() != vv.rows() {
            return Err(Error::shape("attention q/k/v shapes disagree"));
        }
        if tokens == 0 || qv.rows() % tokens != 0 {
            return Err(Error::shape(format!(
                "{} rows not divisible into blocks of {tokens} tokens",
                qv.rows()
            )));
        }
        let h = qv.cols();
        let scale = 1.0 / (h as f64).sqrt();
        let samples = qv.rows() / tokens;
        let mut out = Tensor::zeros(qv.rows(), vv.cols());
        let mut probs = Vec::with_capacity(samples);
        for s in 0..samples {
            let base = s * tokens;
            let mut scores = Tensor::zeros(tokens, tokens);
            for i in 0..tokens {
                for j in 0..tokens {
                    let dot: f64 = qv.row(base + i).iter().zip(kv.row(base + j)).map(|(a, b)| a * b).sum();
                    scores.set(i, j, dot * scale);
                }
            }
            let p = softmax_rows(&scores);
            for i in 0..tokens {
                for j in 0..tokens {
                    let w = p.get(i, j);
                    for c in 0..vv.cols() {
                        let cur = out.get(base + i, c);
                        out.set(base + i, c, cur + w * vv.get(base + j, c));
                    }
                }
            }
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, tokens, probs }, rg))
    }

    /// Averages each block of `tokens` rows into one row.
    pub fn token_mean_pool(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let xv = self.value(x);
        if tokens == 0 || !xv.rows().is_multiple_of(tokens) {
            return Err(Error::shape("token_mean_pool: rows not divisible by tokens"));
        }
        let samples = xv.rows() / tokens;
        let mut out = Tensor::zeros(samples, xv.cols());
        for s in 0..samples {
            for t in 0..tokens {
                for (c, v) in xv.row(s * tokens + t).iter().enumerate() {
                    let cur = out.get(s, c);
                    out.set(s, c, cur + v / tokens as f64);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::TokenMeanPool(x, tokens), rg))
    }

    /// Inverted dropout: in train mode zeroes entries with probability `p` and
    /// divides survivors by `1 − p`; in eval mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut Stream) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 - p;
        let mask_data = (0..xv.len())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::new(xv.rows(), xv.cols(), mask_data).expect("mask shape");
        let value = xv.zip_map(&mask, |a, m| a * m).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::MulConst(x, mask), rg)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.accumulate(&g).expect("gradient shape"),
            None => node.grad = Some(g),
        }
    }

    /// Seeds `d loss / d loss = 1` and propagates to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_backward(idx, &upstream)?;
            self.nodes[idx].grad = Some(upstream);
            for (parent, g) in contributions {
                self.accumulate(parent, g);
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, up.matmul(&self.value(*b).transpose())?));
                }
                if self.rg(*b) {
                    out.push((*b, self.value(*a).transpose().matmul(up)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, up.clone()));
                out.push((*b, up.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, up.clone()));
                out.push((*b, up.scale(-1.0)));
            }
            Op::Scale(a, s) => out.push((*a, up.scale(*s))),
            Op::AddRow(x, row) => {
                out.push((*x, up.clone()));
                if self.rg(*row) {
                    let m = up.cols();
                    let mut g = Tensor::zeros(1, m);
                    for i in 0..up.rows() {
                        for (j, v) in up.row(i).iter().enumerate() {
                            g.data_mut()[j] += v;
                        }
                    }
                    out.push((*row, g));
                }
            }
            Op::MulConst(x, mask) => out.push((*x, up.zip_map(mask, |g, m| g * m)?)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                out.push((*x, up.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 })?));
            }
            Op::SoftmaxRows(x) => {
                out.push((*x, softmax_rows_backward(&node.value, up)));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::full(xv.rows(), xv.cols(), up.item())));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = up.item() / xv.len() as f64;
                out.push((*x, Tensor::full(xv.rows(), xv.cols(), g)));
            }
            Op::Transpose(x) => out.push((*x, up.transpose())),
            Op::CrossEntropy { logits, probs, labels } => {
                let n = labels.len() as f64;
                let mut g = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    let cur = g.get(i, l);
                    g.set(i, l, cur - 1.0);
                }
                out.push((*logits, g.scale(up.item() / n)));
            }
            Op::GradReversal(x, s) => out.push((*x, up.scale(-*s))),
            Op::Frobenius(m, target) => {
                let mv = self.value(*m);
                let diff = match target {
                    PenaltyTarget::Identity => mv.sub(&Tensor::identity(mv.rows()))?,
                    PenaltyTarget::Zero => mv.clone(),
                };
                out.push((*m, diff.scale(2.0 * up.item())));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let m = xhat.cols();
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xhat.rows(), m);
                    #[allow(clippy::needless_range_loop)]
                    for i in 0..xhat.rows() {
                        let dxhat: Vec<f64> = (0..m).map(|j| up.get(i, j) * gv.data()[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                        let mean_dx = (0..m).map(|j| dxhat[j] * xhat.get(i, j)).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx.set(i, j, inv_std[i] * (dxhat[j] - mean_d - xhat.get(i, j) * mean_dx));
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = Tensor::zeros(1, m);
                    let mut db = Tensor::zeros(1, m);
                    for i in 0..xhat.rows() {
                        for j in 0..m {
                            dg.data_mut()[j] += up.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += up.get(i, j);
                        }
                    }
                    out.push((*gain, dg));
                    out.push((*bias, db));
                }
            }
            Op::Attention { q, k, v, tokens, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let t = *tokens;
                let scale = 1.0 / (qv.cols() as f64).sqrt();
                let mut dq = Tensor::zeros(qv.rows(), qv.cols());
                let mut dk = Tensor::zeros(kv.rows(), kv.cols());
                let mut dv = Tensor::zeros(vv.rows(), vv.cols());
                for (s, p) in probs.iter().enumerate() {
                    let base = s * t;
                    // dP[i][j] = dO_i · V_j ; dV_j += Σ_i P[i][j] dO_i
                    let mut dp = Tensor::zeros(t, t);
                    for i in 0..t {
                        for j in 0..t {
                            let mut acc = 0.0;
                            for c in 0..vv.cols() {
                                let g = up.get(base + i, c);
                                acc += g * vv.get(base + j, c);
                                let cur = dv.get(base + j, c);
                                dv.set(base + j, c, cur + p.get(i, j) * g);
                            }
                            dp.set(i, j, acc);
                        }
                    }
                    let ds = softmax_rows_backward(p, &dp);
                    for i in 0..t {
                        for j in 0..t {
                            let w = ds.get(i, j) * scale;
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..qv.cols() {
                                let cq = dq.get(base + i, c);
                                dq.set(base + i, c, cq + w * kv.get(base + j, c));
                                let ck = dk.get(base + j, c);
                                dk.set(base + j, c, ck + w * qv.get(base + i, c));
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::new(xv.rows(), xv.cols(), up.data().to_vec())?));
            }
            Op::TokenMeanPool(x, tokens) => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for c in 0..xv.cols() {
                        g.set(r, c, up.get(r / tokens, c) / *tokens as f64);
                    }
                }
                out.push((*x, g));
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let m = x.cols();
    for i in 0..x.rows() {
        let row = &mut out.data_mut()[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Given `y = softmax(x)` row-wise and `dy`, returns `dx = y ⊙ (dy − rowsum(dy ⊙ y))`.
fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let dot: f64 = y.row(i).iter().zip(dy.row(i)).map(|(a, b)| a * b).sum();
        for j in 0..y.cols() {
            dx.set(i, j, y.get(i, j) * (dy.get(i, j) - dot));
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut g = Graph::new();
        let m = g.constant(t(&[vec![1.5, -2.0], vec![0.25, 7.0]]));
        let i = g.constant(Tensor::identity(2));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y), g.value(m));

        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(t(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(1, 2));
        let loss = g.cross_entropy_logits(logits, &[0]).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logits_do_not_overflow() {
        let mut g = Graph::new();
        let logits = g.param(t(&[vec![1000.0, -1000.0]]));
        let loss = g.cross_entropy_logits(logits, &[0]).unwrap();
        let v = g.value(loss).item();
        assert!(v.is_finite() && v.abs() < 1e-12);
        g.backward(loss).unwrap();
        assert!(g.grad(logits).is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(g.cross_entropy_logits(logits, &[0, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn grl_forward_identity_backward_negated() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, -3.0], vec![0.5, 2.0]]));
        let y = g.gradient_reversal(x, 1.0);
        assert_eq!(g.value(y), g.value(x));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn grl_twice_restores_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, 2.0]]));
        let y = g.gradient_reversal(x, 1.0);
        let z = g.gradient_reversal(y, 1.0);
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frobenius_values() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let p = g.frobenius_penalty(i, PenaltyTarget::Identity).unwrap();
        assert_eq!(g.value(p).item(), 0.0);
        let z = g.constant(Tensor::zeros(3, 3));
        let p = g.frobenius_penalty(z, PenaltyTarget::Identity).unwrap();
        assert_eq!(g.value(p).item(), 3.0);
        let r = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            g.frobenius_penalty(r, PenaltyTarget::Identity),
            Err(Error::Shape(_))
        ));
        assert!(g.frobenius_penalty(r, PenaltyTarget::Zero).is_ok());
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, 2.0, 3.0]]));
        let mut rng = Stream::new(1, "dropout");
        let y = g.dropout(x, 0.1, false, &mut rng);
        assert_eq!(x, y);
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn dropout_train_mask_is_inverted() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(50, 40, 1.0));
        let mut rng = Stream::new(1, "dropout");
        let y = g.dropout(x, 0.25, true, &mut rng);
        let v = g.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-15));
        let mean = v.sum() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(2, 2, 1.0));
        let x = g.param(Tensor::full(2, 2, 0.5));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), Tensor::zeros(2, 2));
        assert_eq!(g.grad(x), Tensor::full(2, 2, 2.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(2, 2, 0.5));
        let d = g.detach(x);
        let s = g.sum(d);
        let s2 = g.sum(x);
        let total = g.add(s, s2).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(x), Tensor::full(2, 2, 1.0));
    }
}
