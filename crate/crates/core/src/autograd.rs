//! Reverse-mode automatic differentiation over a fixed set of tensor ops.
//!
//! A [`Tape`] records every operation in execution order. Because inputs must
//! already exist when an op is recorded, tape order is a topological order and
//! [`Tape::backward`] only has to walk it once in reverse.
//!
//! Gradients accumulate into leaves across calls to `backward`; call
//! [`Tape::zero_grad`] to reset them. Intermediate gradients are never
//! retained between calls.

use crate::error::{Error, Result};
use crate::tensor::{axpy, gemm_acc, gemm_at_acc, gemm_bt_acc, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

// tanh-approximation constants for GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, p: usize, b_batched: bool },
    Add { a: Var, b: Var },
    AddRows { x: Var, y: Var, repeat: usize },
    AddGathered { x: Var, table: Var, rows: Vec<Option<usize>> },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    MeanRows { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Linear { x: Var, w: Var, b: Var, rows: usize, d_in: usize, d_out: usize },
    Relu { x: Var },
    Gelu { x: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, lq: usize, lk: usize, dh: usize, probs: Vec<f64> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    ConcatRows { parts: Vec<Var> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Operation log for one forward/backward pass. Not shared across threads.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.numel()]);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, `None` for non-leaves or frozen leaves.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Matrix product. Supports `[m,k]·[k,p]`, `[B,m,k]·[B,k,p]` and
    /// `[B,m,k]·[k,p]` (right operand shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, b_batched) = match sa.len() {
            2 => (1, sa[0], sa[1], false),
            3 => (sa[0], sa[1], sa[2], sb.len() == 3),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (kb, p) = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => (sb[0], sb[1]),
            (3, 3) if sb[0] == batch => (sb[1], sb[2]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if kb != k {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * p];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let b_off = if b_batched { bi * k * p } else { 0 };
                gemm_acc(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[b_off..b_off + k * p],
                    &mut out[bi * m * p..(bi + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, p] } else { vec![batch, m, p] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, p, b_batched }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// `out[i] = x[i] + y[i / repeat]` over rows of a rank-2 `x`. A rank-1
    /// `y` is treated as a single row.
    pub fn add_rows(&mut self, x: Var, y: Var, repeat: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sy = self.shape(y).to_vec();
        let (y_rows, y_cols) = match sy.len() {
            1 => (1, sy[0]),
            2 => (sy[0], sy[1]),
            _ => return Err(Error::shape("add_rows", &sx, &sy)),
        };
        if sx.len() != 2 || sx[1] != y_cols || repeat == 0 || sx[0] != y_rows * repeat {
            return Err(Error::shape("add_rows", &sx, &sy));
        }
        let cols = y_cols;
        let xd = self.data(x);
        let yd = self.data(y);
        let mut out = xd.to_vec();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let yr = &yd[(r / repeat) * cols..(r / repeat + 1) * cols];
            for (o, &v) in row.iter_mut().zip(yr) {
                *o = *o + v;
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::AddRows { x, y, repeat }, &[x, y]))
    }

    /// `out[r] = x[r] + table[rows[r]]`, leaving rows mapped to `None` as is.
    pub fn add_gathered_rows(&mut self, x: Var, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let st = self.shape(table).to_vec();
        if sx.len() != 2 || st.len() != 2 || sx[1] != st[1] || rows.len() != sx[0] {
            return Err(Error::shape("add_gathered_rows", &sx, &st));
        }
        if let Some(&bad) = rows.iter().flatten().find(|&&r| r >= st[0]) {
            return Err(Error::Index { what: "gathered table row", index: bad, len: st[0] });
        }
        let cols = sx[1];
        let td = self.data(table);
        let mut out = self.data(x).to_vec();
        for (row, src) in out.chunks_mut(cols).zip(rows) {
            if let Some(r) = src {
                for (o, &v) in row.iter_mut().zip(&td[r * cols..(r + 1) * cols]) {
                    *o = *o + v;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::AddGathered { x, table, rows: rows.to_vec() }, &[x, table]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let data = self.data(x).iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same length");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean over the rows of `[L, d]`, giving `[d]`.
    ///
    /// Each column is summed in ascending value order, so the result is
    /// bit-identical under any permutation of the rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] == 0 {
            return Err(Error::shape("mean_rows", &sx, &[]));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = self.data(x);
        let inv = T::one() / T::from_usize(rows).expect("row count fits");
        let mut column = vec![T::zero(); rows];
        let mut out = vec![T::zero(); cols];
        for (c, o) in out.iter_mut().enumerate() {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = xd[r * cols + c];
            }
            column.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            *o = column.iter().copied().fold(T::zero(), |acc, v| acc + v) * inv;
        }
        let value = Tensor::new(vec![cols], out)?;
        Ok(self.push(value, Op::MeanRows { x }, &[x]))
    }

    /// Softmax along `axis`, shifted by the slice maximum for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0f64; xd.len()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c].as_f64() - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = T::from_f64_lossy(h) * g[c] + b[c];
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// `x · W + b` for `x` of shape `[d_in]` or `[L, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, d_in) = match sx.len() {
            1 => (1, sx[0]),
            2 => (sx[0], sx[1]),
            _ => return Err(Error::shape("linear", &sx, &sw)),
        };
        if sw.len() != 2 || sw[0] != d_in {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let d_out = sw[1];
        if self.shape(b) != [d_out] {
            return Err(Error::shape("linear", &sw, self.shape(b)));
        }
        let bias = self.data(b);
        let mut out = Vec::with_capacity(rows * d_out);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm_acc(self.data(x), self.data(w), &mut out, rows, d_in, d_out);
        let shape = if sx.len() == 1 { vec![d_out] } else { vec![rows, d_out] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b, rows, d_in, d_out }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same length");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| T::from_f64_lossy(gelu(v.as_f64()))).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same length");
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// `-log softmax(logits)[label]` for a `[C]` logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 1 {
            return Err(Error::shape("cross_entropy", &sl, &[]));
        }
        if label >= sl[0] {
            return Err(Error::Index { what: "cross_entropy label", index: label, len: sl[0] });
        }
        let ld: Vec<f64> = self.data(logits).iter().map(|v| v.as_f64()).collect();
        if ld.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("cross_entropy logits contain NaN".into()));
        }
        let max = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = ld.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        let probs: Vec<f64> = ld.iter().map(|v| (v - log_z).exp()).collect();
        let loss = log_z - ld[label];
        let value = Tensor::scalar(T::from_f64_lossy(loss));
        Ok(self.push(value, Op::CrossEntropy { logits, label, probs }, &[logits]))
    }

    /// Scaled dot-product attention per head: `softmax(q·kᵀ/√dₕ)·v`.
    ///
    /// `q` is `[h, Lq, dₕ]`, `k` and `v` are `[h, Lk, dₕ]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (heads, lq, dh) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if lq == 0 || lk == 0 {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut probs = vec![0.0f64; heads * lq * lk];
        let mut out = vec![T::zero(); heads * lq * dh];
        let mut kt = vec![T::zero(); dh * lk];
        let mut scores = vec![T::zero(); lq * lk];
        let mut weights = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let qh = &qd[h * lq * dh..(h + 1) * lq * dh];
            let vh = &vd[h * lk * dh..(h + 1) * lk * dh];
            transpose_into(&kd[h * lk * dh..(h + 1) * lk * dh], lk, dh, &mut kt);
            scores.iter_mut().for_each(|s| *s = T::zero());
            gemm_acc(qh, &kt, &mut scores, lq, dh, lk);
            for i in 0..lq {
                let row = &scores[i * lk..(i + 1) * lk];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let w_row = &mut weights[i * lk..(i + 1) * lk];
                let mut total = T::zero();
                for (w, &s) in w_row.iter_mut().zip(row) {
                    *w = ((s - max) * scale).exp();
                    total = total + *w;
                }
                let p_row = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for (p, w) in p_row.iter_mut().zip(w_row.iter_mut()) {
                    *w = *w / total;
                    *p = w.as_f64();
                }
            }
            gemm_acc(&weights, vh, &mut out[h * lq * dh..(h + 1) * lq * dh], lq, lk, dh);
        }
        let value = Tensor::new(vec![heads, lq, dh], out)?;
        Ok(self.push(
            value,
            Op::Attention { q, k, v, heads, lq, lk, dh, probs },
            &[q, k, v],
        ))
    }

    /// `[L, d]` → `[h, L, d/h]`, head `i` taking columns `i·d/h .. (i+1)·d/h`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || heads == 0 || !sx[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &sx, &[heads]));
        }
        let (l, d) = (sx[0], sx[1]);
        let dh = d / heads;
        let xd = self.data(x);
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            for r in 0..l {
                out[(h * l + r) * dh..(h * l + r + 1) * dh]
                    .copy_from_slice(&xd[r * d + h * dh..r * d + (h + 1) * dh]);
            }
        }
        let value = Tensor::new(vec![heads, l, dh], out)?;
        Ok(self.push(value, Op::SplitHeads { x, heads }, &[x]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::shape("merge_heads", &sx, &[]));
        }
        let (heads, l, dh) = (sx[0], sx[1], sx[2]);
        let d = heads * dh;
        let xd = self.data(x);
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            for r in 0..l {
                out[r * d + h * dh..r * d + (h + 1) * dh]
                    .copy_from_slice(&xd[(h * l + r) * dh..(h * l + r + 1) * dh]);
            }
        }
        let value = Tensor::new(vec![l, d], out)?;
        Ok(self.push(value, Op::MergeHeads { x }, &[x]))
    }

    /// Stacks rank-1 (`[d]`) and rank-2 (`[r, d]`) parts into `[Σr, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let cols = *self.shape(*first).last().unwrap_or(&0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            let r = match sp.len() {
                1 => 1,
                2 => sp[0],
                _ => return Err(Error::shape("concat_rows", sp, &[cols])),
            };
            if sp.last() != Some(&cols) {
                return Err(Error::shape("concat_rows", sp, &[cols]));
            }
            data.extend_from_slice(self.data(p));
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(acc)) = (g, self.nodes[idx].grad.as_mut()) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, p, b_batched } => {
                let (batch, m, k, p) = (*batch, *m, *k, *p);
                let ad = self.data(*a);
                let bd = self.data(*b);
                if wants(*a) {
                    let ga = slot(grads, *a, ad.len());
                    for bi in 0..batch {
                        let b_off = if *b_batched { bi * k * p } else { 0 };
                        gemm_bt_acc(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &bd[b_off..b_off + k * p],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            p,
                        );
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bd.len());
                    for bi in 0..batch {
                        let b_off = if *b_batched { bi * k * p } else { 0 };
                        gemm_at_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[b_off..b_off + k * p],
                            m,
                            k,
                            p,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRows { x, y, repeat } => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if wants(*y) {
                    let ylen = self.nodes[y.0].value.numel();
                    let cols = *self.shape(*y).last().expect("rank >= 1");
                    let gy = slot(grads, *y, ylen);
                    for (r, row) in g.chunks(cols).enumerate() {
                        let yr = r / repeat;
                        add_into(&mut gy[yr * cols..(yr + 1) * cols], row);
                    }
                }
            }
            Op::AddGathered { x, table, rows } => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if wants(*table) {
                    let st = self.shape(*table);
                    let cols = st[1];
                    let gt = slot(grads, *table, st[0] * cols);
                    for (row, src) in g.chunks(cols).zip(rows) {
                        if let Some(r) = src {
                            add_into(&mut gt[r * cols..(r + 1) * cols], row);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = T::from_f64_lossy(*factor);
                let gx = slot(grads, *x, g.len());
                axpy(f, g, gx);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|v| *v = *v + g[0]);
            }
            Op::MeanRows { x } => {
                let sx = self.shape(*x);
                let (rows, cols) = (sx[0], sx[1]);
                let inv = T::one() / T::from_usize(rows).expect("row count fits");
                let gx = slot(grads, *x, rows * cols);
                for row in gx.chunks_mut(cols) {
                    axpy(inv, g, row);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let gx = slot(grads, *x, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: T = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            gx[idx(j)] = gx[idx(j)] + y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[gamma.0].value.numel();
                let gam = self.data(*gamma);
                let rows = g.len() / d;
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * T::from_f64_lossy(xhat[r * d + c]);
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c].as_f64() * gam[c].as_f64();
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g[r * d + c].as_f64() * gam[c].as_f64();
                            let v = rstd[r] / d as f64
                                * (d as f64 * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                            gx[r * d + c] = gx[r * d + c] + T::from_f64_lossy(v);
                        }
                    }
                }
            }
            Op::Linear { x, w, b, rows, d_in, d_out } => {
                let (rows, d_in, d_out) = (*rows, *d_in, *d_out);
                if wants(*x) {
                    let gx = slot(grads, *x, rows * d_in);
                    gemm_bt_acc(g, self.data(*w), gx, rows, d_in, d_out);
                }
                if wants(*w) {
                    let gw = slot(grads, *w, d_in * d_out);
                    gemm_at_acc(self.data(*x), g, gw, rows, d_in, d_out);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, d_out);
                    for row in g.chunks(d_out) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::Gelu { x } => {
                let xd = self.data(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let d = T::from_f64_lossy(gelu_grad(xd[i].as_f64()));
                    gx[i] = gx[i] + g[i] * d;
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                let gl = slot(grads, *logits, probs.len());
                for (j, &p) in probs.iter().enumerate() {
                    let target = if j == *label { 1.0 } else { 0.0 };
                    gl[j] = gl[j] + g[0] * T::from_f64_lossy(p - target);
                }
            }
            Op::Attention { q, k, v, heads, lq, lk, dh, probs } => {
                self.backprop_attention(
                    g,
                    grads,
                    (*q, *k, *v),
                    (*heads, *lq, *lk, *dh),
                    probs,
                );
            }
            Op::SplitHeads { x, heads } => {
                let sx = self.shape(*x);
                let (l, d) = (sx[0], sx[1]);
                let dh = d / heads;
                let gx = slot(grads, *x, l * d);
                for h in 0..*heads {
                    for r in 0..l {
                        add_into(
                            &mut gx[r * d + h * dh..r * d + (h + 1) * dh],
                            &g[(h * l + r) * dh..(h * l + r + 1) * dh],
                        );
                    }
                }
            }
            Op::MergeHeads { x } => {
                let sx = self.shape(*x);
                let (heads, l, dh) = (sx[0], sx[1], sx[2]);
                let d = heads * dh;
                let gx = slot(grads, *x, l * d);
                for h in 0..heads {
                    for r in 0..l {
                        add_into(
                            &mut gx[(h * l + r) * dh..(h * l + r + 1) * dh],
                            &g[r * d + h * dh..r * d + (h + 1) * dh],
                        );
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if wants(p) {
                        add_into(slot(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
        }
    }

    fn backprop_attention(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (Var, Var, Var),
        (heads, lq, lk, dh): (usize, usize, usize, usize),
        probs: &[f64],
    ) {
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut vt = vec![T::zero(); dh * lk];
        let mut p = vec![T::zero(); lq * lk];
        let mut dp = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let (qs, ks) = (h * lq * dh..(h + 1) * lq * dh, h * lk * dh..(h + 1) * lk * dh);
            let gh = &g[qs.clone()];
            let ph = &probs[h * lq * lk..(h + 1) * lq * lk];
            p.iter_mut().zip(ph).for_each(|(d, &s)| *d = T::from_f64_lossy(s));
            transpose_into(&vd[ks.clone()], lk, dh, &mut vt);
            dp.iter_mut().for_each(|d| *d = T::zero());
            gemm_acc(gh, &vt, &mut dp, lq, dh, lk);
            gemm_at_acc(&p, gh, &mut gv[ks.clone()], lq, lk, dh);
            // dp becomes the score gradient: p ⊙ (dp − Σ p·dp) / √dₕ
            for i in 0..lq {
                let row = i * lk..(i + 1) * lk;
                let weighted: f64 = ph[row.clone()].iter().zip(&dp[row.clone()]).map(|(&a, b)| a * b.as_f64()).sum();
                for j in row {
                    dp[j] = T::from_f64_lossy(ph[j] * (dp[j].as_f64() - weighted) * scale);
                }
            }
            gemm_acc(&dp, &kd[ks.clone()], &mut gq[qs.clone()], lq, lk, dh);
            gemm_at_acc(&dp, &qd[qs], &mut gk[ks], lq, lk, dh);
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                add_into(slot(grads, var, local.len()), &local);
            }
        }
    }
}

/// `dst[c, r] = src[r, c]` for a `rows × cols` source.
fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0]]));
        let b = tape.constant(t2(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-9);

        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (got, want) in tape.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_nan_is_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[&[0.0, 1.0], &[0.0, 3.0]]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![1, 1, 3], vec![0.3, -2.0, 1.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 1, 3], vec![5.0, 1.0, 0.5]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 1, 3], vec![7.0, -8.0, 9.0]).unwrap());
        let o = tape.attention(q, k, v).unwrap();
        assert_eq!(tape.value(o).data(), &[7.0, -8.0, 9.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 3, 2], vec![0.4, 0.1, 0.4, 0.1, 0.4, 0.1]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 3, 2], vec![1.0, 0.0, 2.0, 3.0, 6.0, -3.0]).unwrap());
        let o = tape.attention(q, k, v).unwrap();
        for row in tape.value(o).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && row[1].abs() < 1e-12);
        }
    }

    #[test]
    fn mean_rows_of_identical_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[&[1.5, -2.0], &[1.5, -2.0], &[1.5, -2.0]]));
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, -2.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new(vec![4], vec![0.7; 4]).unwrap());
        for label in 0..4 {
            let ce = tape.cross_entropy(l, label).unwrap();
            assert!((tape.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(tape.cross_entropy(l, 4), Err(Error::Index { .. })));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[&[1.0, 2.0, 3.0, 10.0], &[-4.0, 0.0, 0.5, 0.25]]));
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 8.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 5.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0, 20.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2], 1.0), true);
        let c = tape.constant(Tensor::full(vec![2], 2.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn split_then_merge_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![2, 6], data.clone()).unwrap());
        let s = tape.split_heads(x, 3).unwrap();
        assert_eq!(tape.shape(s), &[3, 2, 2]);
        // head 1 holds columns 2..4 of each row
        assert_eq!(&tape.value(s).data()[4..8], &[2.0, 3.0, 8.0, 9.0]);
        let m = tape.merge_heads(s).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
    }
}
