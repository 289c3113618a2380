//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants and carry no
//! backward information. [`Tape::backward`] walks the record once in reverse;
//! the tape must be [`Tape::reset`] before it can record the next step.

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MIN_NORM: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every recorded node and gradient so the tape can record again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Record a leaf whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward's loss w.r.t. `v`. `None` before backward
    /// or when `v` is not differentiable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::State(
                "tape already consumed by backward; call reset first".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_open()?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale(a, factor), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let ta = self.value(a);
        let (m, n) = ta.dims2("transpose")?;
        let out = Tensor::matrix(n, m, transpose_raw(ta.data(), m, n))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn row_operand(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2(op)?;
        let ok = match tb.shape() {
            [1, c] | [c] => *c == n,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        Ok((m, n))
    }

    /// `a[m×n] + b[1×n]`, adding `b` to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (_, n) = self.row_operand("add_row", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[m×n] ⊙ b[1×n]`, scaling every row elementwise by `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (_, n) = self.row_operand("mul_row", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tb.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRow(a, b), &[a, b]))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (m, n) = tx.dims2("layer_norm_rows")?;
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[n_seq·seq_len × d]`; rows `s·seq_len..(s+1)·seq_len`
    /// form sequence `s` and columns are split evenly into `heads` heads. With
    /// `causal`, position `i` attends only to positions `0..=i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        self.check_open()?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.dims2("attention")?;
        if tk.shape() != tq.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if tv.shape() != tq.shape() {
            return Err(Error::shape("attention", tq.shape(), tv.shape()));
        }
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: {rows}×{d} cannot be split into sequences of {seq_len} with {heads} heads"
            )));
        }
        let n_seq = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let visible = if causal { i + 1 } else { seq_len };
                    let qi = &qd[(base + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate().take(visible) {
                        *sc = dot(qi, &kd[(base + j) * d + off..][..dh]) * scale;
                        max = max.max(*sc);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut().take(visible) {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let prow = &mut probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let orow = &mut out[(base + i) * d + off..][..dh];
                    for j in 0..visible {
                        let p = scores[j] / total;
                        prow[j] = p;
                        let vj = &vd[(base + j) * d + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rows, d, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Row `j` of the output is row `indices[j]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check_open()?;
        let tt = self.value(table);
        let (v, d) = tt.dims2("gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(Error::Index {
                    value: ix,
                    bound: v,
                });
            }
            data.extend_from_slice(tt.row(ix));
        }
        let out = Tensor::matrix(indices.len(), d, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_open()?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let (_, d) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2("concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (m, n) = tx.dims2("l2_normalize_rows")?;
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = tx.row(i);
            let nrm = super::tensor::norm(row);
            if !(nrm >= MIN_NORM) {
                return Err(Error::Degenerate { row: i });
            }
            out.extend(row.iter().map(|v| v / nrm));
            norms.push(nrm);
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let tx = self.value(x);
        let (m, n) = tx.dims2("softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax_row(tx.row(i), i)?);
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_open()?;
        let tl = self.value(logits);
        let (m, k) = tl.dims2("cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(m * k);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index { value: t, bound: k });
            }
            let row = tl.row(i);
            let p = softmax_row(row, i)?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(p);
        }
        let out = Tensor::scalar(loss / m as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), &[x]))
    }

    /// Populate gradients of the scalar `loss` for every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * tb[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * ta[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                acc(*a, &mut |s| {
                    // dA = G · Bᵀ
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            s[r * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    // dB = Aᵀ · G
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = ta.data()[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (x, y) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *x += a_rp * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                let gt = transpose_raw(g, m, n);
                acc(*a, &mut |s| s.iter_mut().zip(&gt).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(a, b) => {
                let n = out.cols();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| {
                    for (j, y) in g.iter().enumerate() {
                        s[j % n] += y;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let n = out.cols();
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * tb[j % n];
                    }
                });
                acc(*b, &mut |s| {
                    for (j, y) in g.iter().enumerate() {
                        s[j % n] += y * ta[j];
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.cols();
                let xhat = out.data();
                acc(*x, &mut |s| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx = dot(gr, xr);
                        for c in 0..n {
                            s[r * n + c] +=
                                inv / n as f64 * (n as f64 * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        let v = tx[j];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        s[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, g, grads),
            Op::Gather { table, indices } => {
                let d = out.cols();
                acc(*table, &mut |s| {
                    for (j, &ix) in indices.iter().enumerate() {
                        for (x, y) in s[ix * d..(ix + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let part = &g[offset..offset + len];
                    acc(p, &mut |s| s.iter_mut().zip(part).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = out.cols();
                let y = out.data();
                acc(*x, &mut |s| {
                    for (r, nrm) in norms.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let proj = dot(gr, yr);
                        for c in 0..n {
                            s[r * n + c] += (gr[c] - yr[c] * proj) / nrm;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                acc(*x, &mut |s| {
                    for r in 0..out.rows() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let inner = dot(gr, yr);
                        for c in 0..n {
                            s[r * n + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let m = targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            s[r * k + c] += g[0] * (probs[r * k + c] - onehot) / m;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (tq.rows(), tq.cols());
        let n_seq = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq_len];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_len {
                    let prow = &probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let go = &g[(base + i) * d + off..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..seq_len {
                        if prow[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        dp[j] = dot(go, &vd[(base + j) * d + off..][..dh]);
                        weighted += prow[j] * dp[j];
                        let dvj = &mut dv[(base + j) * d + off..][..dh];
                        for (x, y) in dvj.iter_mut().zip(go) {
                            *x += prow[j] * y;
                        }
                    }
                    let qi = &qd[(base + i) * d + off..][..dh];
                    for j in 0..seq_len {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        let kj = &kd[(base + j) * d + off..][..dh];
                        let dqi = &mut dq[(base + i) * d + off..][..dh];
                        for (x, y) in dqi.iter_mut().zip(kj) {
                            *x += ds * y;
                        }
                        let dkj = &mut dk[(base + j) * d + off..][..dh];
                        for (x, y) in dkj.iter_mut().zip(qi) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(slot) => slot.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(contrib),
            }
        }
    }
}

/// Row softmax honoring `-inf` as a mask. `row_index` only labels errors.
pub fn softmax_row(row: &[f64], row_index: usize) -> Result<Vec<f64>> {
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Contract(format!(
            "softmax row {row_index} contains NaN or +inf"
        )));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked { row: row_index });
    }
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, x) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * x;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
