//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into every node that depends on a parameter.

use super::tensor::{gelu_grad_scalar, gelu_scalar, masked_softmax_slice, matmul_a_bt_acc, matmul_at_b_acc, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Attention weights saved by [`Tape::attention`], laid out `heads × queries × keys`.
#[derive(Clone, Debug)]
pub struct AttentionProbs<'a> {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub probs: &'a [f64],
}

impl AttentionProbs<'_> {
    pub fn head(&self, h: usize) -> Vec<Vec<f64>> {
        let stride = self.queries * self.keys;
        self.probs[h * stride..(h + 1) * stride].chunks(self.keys).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?;
        if g.is_empty() {
            return None;
        }
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Like [`Tape::grad`] but returns zeros for unreached nodes.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, q, k, .. } => Some(AttentionProbs {
                heads: *heads,
                queries: self.value(*q).rows(),
                keys: self.value(*k).rows(),
                probs,
            }),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(dim_err!("transpose needs a 2-d tensor, got {:?}", x.shape()));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err!("add shapes differ: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err!("mul shapes differ: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        if r.len() != c {
            return Err(dim_err!("row vector of length {} cannot broadcast over {:?}", r.len(), x.shape()));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Row-wise softmax over the last dim. `mask`, when given, has one entry per
    /// element of `a`; entries with `false` are excluded from normalization and
    /// come out as exactly `0.0`.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = &mask {
            if m.len() != x.len() {
                return Err(dim_err!("mask has {} entries for tensor {:?}", m.len(), x.shape()));
            }
        }
        let c = x.cols();
        let mut data = vec![0.0; x.len()];
        for (r, (src, dst)) in x.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let row_mask = mask.as_ref().map(|m| &m[r * c..(r + 1) * c]);
            masked_softmax_slice(src, row_mask, dst)
                .ok_or_else(|| Error::EmptySegment(format!("softmax row {r} has no unmasked entries")))?;
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Normalizes each row over the last dim with `eps` = [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gamma), self.value(beta));
        let d = x.cols();
        if g.len() != d || b.len() != d {
            return Err(dim_err!("layer_norm affine params of length {}/{} for width {d}", g.len(), b.len()));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x: a, gamma, beta, xhat, inv_std }, rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Mean over rows of `-log softmax(logits_row)[label]`; one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let c = x.cols();
        if labels.len() != x.rows() {
            return Err(dim_err!("{} labels for {} logit rows", labels.len(), x.rows()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = x.row(r);
            let p = &mut probs[r * c..(r + 1) * c];
            masked_softmax_slice(row, None, p).expect("non-empty row");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= labels.len() as f64;
        let out = Tensor::new(vec![1], vec![loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = (x.rows(), x.cols());
        if rows.is_empty() {
            return Err(dim_err!("gather_rows with no rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(x.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat_rows of nothing"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(dim_err!("concat_rows width mismatch: {c} vs {}", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = (x.rows(), x.cols());
        let mut data = vec![0.0; c];
        for r in 0..n {
            for (o, v) in data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= n as f64;
        }
        let out = Tensor::new(vec![1, c], data).expect("row");
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![1], vec![s]).expect("scalar"), Op::Sum(a), rg)
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q` is `[nq, D]`, `k` and `v` are `[nk, D]`; head `h` uses columns
    /// `h*D/heads..(h+1)*D/heads`. `mask` (`nq × nk`, shared by all heads)
    /// removes key positions from each query's softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        if heads == 0 || d % heads != 0 {
            return Err(dim_err!("width {d} is not divisible into {heads} heads"));
        }
        if kt.cols() != d || vt.cols() != d || kt.rows() != vt.rows() {
            return Err(dim_err!(
                "attention operand shapes {:?}, {:?}, {:?} disagree",
                qt.shape(),
                kt.shape(),
                vt.shape()
            ));
        }
        let (nq, nk) = (qt.rows(), kt.rows());
        if let Some(m) = &mask {
            if m.len() != nq * nk {
                return Err(dim_err!("attention mask has {} entries, expected {}", m.len(), nq * nk));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let mut scores = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qt.row(i)[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kt.row(j)[off..off + dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let row_mask = mask.as_ref().map(|m| &m[i * nk..(i + 1) * nk]);
                masked_softmax_slice(&scores, row_mask, p)
                    .ok_or_else(|| Error::EmptySegment(format!("query {i} attends to no key")))?;
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    for (oc, vc) in o.iter_mut().zip(&vt.row(j)[off..off + dh]) {
                        *oc += pj * vc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, scale, probs }, rg))
    }

    /// Backpropagates from the scalar `loss`. Any previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err!("backward needs a scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = &upper[0];
            self.backward_node(i, g, lower);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if let Some(ga) = acc(nodes, grads, *a) {
                    matmul_a_bt_acc(g, bt.data(), ga, m, n, k);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    matmul_at_b_acc(at.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                if let Some(ga) = acc(nodes, grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = acc(nodes, grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                let c = node.value.cols();
                if let Some(gr) = acc(nodes, grads, *row) {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bt.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(at.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            // masked entries have y = 0 and so receive nothing
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = nodes[gamma.0].value.data();
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = (0..d).map(|j| g[r * d + j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = nodes[a.0].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, x), gi) in ga.iter_mut().zip(xs).zip(g) {
                        *o += gi * gelu_grad_scalar(*x);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[logits.0].value.cols();
                let n = labels.len() as f64;
                if let Some(gl) = acc(nodes, grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (probs[r * c + j] - target) / n;
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let c = node.value.cols();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (dst, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[dst * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = acc(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(o, x)| *o += x);
                    }
                    off += n;
                }
            }
            Op::MeanRows(a) => {
                let xv = &nodes[a.0].value;
                let (n, c) = (xv.rows(), xv.cols());
                if let Some(ga) = acc(nodes, grads, *a) {
                    for r in 0..n {
                        for j in 0..c {
                            ga[r * c + j] += g[j] / n as f64;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Attention { q, k, v, heads, scale, probs, .. } => {
                let (qt, kt, vt) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (nq, nk, d) = (qt.rows(), kt.rows(), qt.cols());
                let dh = d / heads;
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut dp = vec![0.0; nk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let go = &g[i * d + off..i * d + off + dh];
                        for j in 0..nk {
                            let vj = &vt.row(j)[off..off + dh];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            if p[j] != 0.0 {
                                for c in 0..dh {
                                    dv[j * d + off + c] += p[j] * go[c];
                                }
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qi = &qt.row(i)[off..off + dh];
                        for j in 0..nk {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kt.row(j)[off..off + dh];
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kj[c];
                                dk[j * d + off + c] += ds * qi[c];
                            }
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(gv) = acc(nodes, grads, *var) {
                        gv.iter_mut().zip(&buf).for_each(|(o, x)| *o += x);
                    }
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Vec<f64>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let buf = &mut grads[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; nodes[v.0].value.len()];
    }
    Some(buf)
}
