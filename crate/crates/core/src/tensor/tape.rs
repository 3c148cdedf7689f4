//! Wengert-list reverse-mode autodiff.
//!
//! Operations append nodes in evaluation order; [`Tape::backward`] walks the
//! list in reverse and accumulates input gradients. Only nodes that depend on
//! a leaf created with `requires_grad = true` receive gradient storage.

use rand::Rng;

use super::kernels::{dot, matmul_a_bt_acc, matmul_at_b_acc, matmul_into};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a batched multi-head attention call.
///
/// `q` holds `batch·q_len` rows, `k`/`v` hold `batch·kv_len` rows; all three
/// are `heads·head_dim` wide. `key_mask[b·kv_len + j] == 0` hides key `j` of
/// example `b` from every query of that example.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub key_mask: Vec<u8>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gelu {
        x: Var,
        cdf: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    Dropout {
        x: Var,
        mult: Vec<T>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Attention probabilities of an attention node, laid out
    /// `[batch, heads, q_len, kv_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| shape_err(op, t.shape(), &[0, 0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// Adds a vector to every row (broadcast over the last dimension).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let d = *tx.shape().last().unwrap();
        if tr.len() != d {
            return Err(shape_err("add_row", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for r in data.chunks_mut(d) {
            for (a, &b) in r.iter_mut().zip(tr.data()) {
                *a += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, rg, Op::AddRow(x, row)))
    }

    /// `x · W + b` for `x[N×in]`, `W[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = T::of(0.5);
        let s2 = T::of(SQRT_2);
        let tx = self.value(x);
        let cdf: Vec<T> = tx
            .data()
            .iter()
            .map(|&v| half * (T::one() + (v / s2).erf()))
            .collect();
        let data = tx.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Gelu { x, cdf }))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(shape_err("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let (g, bi) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.len() / d;
        let inv_d = T::of(1.0 / d as f64);
        let mut out = vec![T::zero(); tx.len()];
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bi[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| src[at(d)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for d in 0..dim {
                    let e = (src[at(d)] - max).exp();
                    out[at(d)] = e;
                    sum += e;
                }
                for d in 0..dim {
                    out[at(d)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            },
        ))
    }

    /// Inverted dropout. Returns `x` itself when inactive.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mult: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mult).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mult }))
    }

    /// Row lookup: `out[i] = table[rows[i]]`. Used for embeddings and for
    /// picking out CLS positions.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows index list"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            rg,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scaled dot-product attention, softmax over unmasked keys, per head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, width) = self.dims2(q, "attention")?;
        let (kr, kw) = self.dims2(k, "attention")?;
        let (vr, vw) = self.dims2(v, "attention")?;
        let AttentionSpec {
            batch,
            q_len,
            kv_len,
            heads,
            ..
        } = spec;
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if qr != batch * q_len || kr != batch * kv_len || kr != vr || kw != width || vw != width {
            return Err(shape_err("attention", &[qr, width], &[kr, kw, vr, vw]));
        }
        if spec.key_mask.len() != batch * kv_len {
            return Err(shape_err(
                "attention mask",
                &[batch, kv_len],
                &[spec.key_mask.len()],
            ));
        }
        let hd = width / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); qr * width];
        let mut probs = vec![T::zero(); batch * heads * q_len * kv_len];
        let mut scores = vec![T::zero(); kv_len];
        for b in 0..batch {
            let mask = &spec.key_mask[b * kv_len..(b + 1) * kv_len];
            for h in 0..heads {
                let off = h * hd;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * width + off..][..hd];
                    let mut max = T::neg_infinity();
                    for j in 0..kv_len {
                        if mask[j] != 0 {
                            let krow = &kd[(b * kv_len + j) * width + off..][..hd];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let mut sum = T::zero();
                    for j in 0..kv_len {
                        if mask[j] != 0 {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            sum += e;
                        }
                    }
                    if sum > T::zero() {
                        for pj in p.iter_mut() {
                            *pj /= sum;
                        }
                    }
                    let orow = &mut out[(b * q_len + i) * width + off..][..hd];
                    for j in 0..kv_len {
                        if p[j] != T::zero() {
                            let vrow = &vd[(b * kv_len + j) * width + off..][..hd];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![qr, width], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            rg,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(shape_err("cross_entropy", &[b, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for r in 0..b {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            total += log_z - row[labels[r]];
        }
        let loss = total / T::of(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ x·w` for a constant weight vector; turns any tensor into a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.len() {
            return Err(shape_err("weighted_sum", tx.shape(), &[weights.len()]));
        }
        let s = tx.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.value(loss).shape(), &[1]));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of `v`, allocated on first use. `None` for constants.
    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Moves the gradient buffer of `v` out of the tape (allocating it if
    /// needed) so it can be filled while other node values are borrowed.
    fn take_acc(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if let Some(mut ga) = self.take_acc(*a) {
                    matmul_a_bt_acc(g, self.value(*b).data(), &mut ga, m, n, k);
                    self.nodes[a.0].grad = Some(ga);
                }
                if let Some(mut gb) = self.take_acc(*b) {
                    matmul_at_b_acc(self.value(*a).data(), g, &mut gb, m, k, n);
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(v) {
                        for (x, &y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(*x) {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                if let Some(gr) = self.acc(*row) {
                    let d = gr.len();
                    for chunk in g.chunks(d) {
                        for (a, &b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Gelu { x, cdf } => {
                if let Some(mut gx) = self.take_acc(*x) {
                    let half = T::of(0.5);
                    let c = T::of(INV_SQRT_2PI);
                    let xs = self.value(*x).data();
                    for (((a, &v), &gy), &cd) in gx.iter_mut().zip(xs).zip(g).zip(cdf) {
                        let pdf = c * (-half * v * v).exp();
                        *a += gy * (cd + v * pdf);
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = xhat.len() / d;
                if self.nodes[x.0].requires_grad {
                    let gv = self.value(*gain).data().to_vec();
                    let inv_d = T::of(1.0 / d as f64);
                    let gx = self.acc(*x).unwrap();
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dx = T::zero();
                        let mut mean_dxx = T::zero();
                        for j in 0..d {
                            dxhat[j] = gy[j] * gv[j];
                            mean_dx += dxhat[j];
                            mean_dxx += dxhat[j] * xh[j];
                        }
                        mean_dx *= inv_d;
                        mean_dxx *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dx - xh[j] * mean_dxx);
                        }
                    }
                }
                if let Some(gg) = self.acc(*gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(*bias) {
                    for chunk in g.chunks(d) {
                        for (a, &b) in gb.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            } => {
                if self.nodes[x.0].requires_grad {
                    let y = self.nodes[i].value.data().to_vec();
                    let (outer, dim, inner) = (*outer, *dim, *inner);
                    let gx = self.acc(*x).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |d: usize| (o * dim + d) * inner + ii;
                            let s: T = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                            for d in 0..dim {
                                gx[at(d)] += y[at(d)] * (g[at(d)] - s);
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mult } => {
                if let Some(gx) = self.acc(*x) {
                    for ((a, &m), &gy) in gx.iter_mut().zip(mult).zip(g) {
                        *a += gy * m;
                    }
                }
            }
            Op::Gather { table, rows } => {
                if let Some(gt) = self.acc(*table) {
                    let d = g.len() / rows.len();
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, &b) in gt[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                        {
                            *a += b;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.acc(*logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / T::of(labels.len() as f64);
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == l { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - t);
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.acc(*x) {
                    for (a, &w) in gx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
    ) {
        if !self.rg(&[q, k, v]) {
            return;
        }
        let width = self.value(q).shape()[1];
        let AttentionSpec {
            batch,
            q_len,
            kv_len,
            heads,
            ..
        } = *spec;
        let hd = width / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut ds = vec![T::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..q_len {
                    let qi = (b * q_len + i) * width + off;
                    let go = &g[qi..qi + hd];
                    let p = &probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let mut pdp = T::zero();
                    for j in 0..kv_len {
                        if p[j] == T::zero() {
                            ds[j] = T::zero();
                            continue;
                        }
                        let kj = (b * kv_len + j) * width + off;
                        let dp = dot(go, &vd[kj..kj + hd]);
                        ds[j] = dp;
                        pdp += p[j] * dp;
                        for (a, &o) in gv[kj..kj + hd].iter_mut().zip(go) {
                            *a += p[j] * o;
                        }
                    }
                    for j in 0..kv_len {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let dsj = p[j] * (ds[j] - pdp) * scale;
                        let kj = (b * kv_len + j) * width + off;
                        for (a, &b) in gq[qi..qi + hd].iter_mut().zip(&kd[kj..kj + hd]) {
                            *a += dsj * b;
                        }
                        for (a, &b) in gk[kj..kj + hd].iter_mut().zip(&qd[qi..qi + hd]) {
                            *a += dsj * b;
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(var) {
                for (a, b) in acc.iter_mut().zip(grad) {
                    *a += b;
                }
            }
        }
    }
}
