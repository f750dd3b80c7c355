//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking them backwards is a valid topological order.
//! All reductions in the backward pass run in a fixed order; identical forward
//! passes therefore give bit-identical gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::parallel;

use super::ops::{self, gelu_grad_scalar, layer_norm_cached};
use super::{SparseMatrix, Tensor};

/// Handle to a node in a [`Graph`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    BlockLeftMul {
        adj: Arc<SparseMatrix>,
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MseLoss {
        pred: Var,
        target: Tensor,
        row_weights: Vec<f64>,
        denom: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Layout of a batched multi-head attention call: `blocks` independent
/// token sets of `tokens` rows each, channels split into `heads` slices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionShape {
    pub blocks: usize,
    pub tokens: usize,
    pub heads: usize,
    pub scale: f64,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` was unreachable.
    pub fn wrt_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf with no name.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named differentiable leaf. A name registered twice returns the
    /// first node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_owned(), v);
        self.param_order.push(name.to_owned());
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Parameter names in registration order.
    pub fn param_names(&self) -> &[String] {
        &self.param_order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let b = bv.data();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x` holds stacked blocks of `tile.rows()` rows; adds `tile` to each.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(tile));
        if xv.cols() != tv.cols() || tv.is_empty() || xv.len() % tv.len() != 0 {
            return Err(Error::shape("add_tiled", xv.shape(), tv.shape()));
        }
        let mut out = xv.clone();
        let t = tv.data();
        for block in out.data_mut().chunks_mut(t.len()) {
            for (o, p) in block.iter_mut().zip(t) {
                *o += p;
            }
        }
        let ng = self.needs(x) || self.needs(tile);
        Ok(self.push(out, Op::AddTiled(x, tile), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: cache.xhat,
                rstd: cache.rstd,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// For each stacked block `X_b` of `adj.n()` rows, computes `adj · X_b`.
    pub fn block_left_mul(&mut self, adj: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = adj.n();
        if n == 0 || !xv.rows().is_multiple_of(n) {
            return Err(Error::shape("block_left_mul", &[n, n], xv.shape()));
        }
        let c = xv.cols();
        let src = xv.data();
        let mut out = vec![0.0; xv.len()];
        parallel::for_each_chunk_mut(&mut out, n * c, |b, block| {
            let xb = &src[b * n * c..(b + 1) * n * c];
            for &(i, j, w) in adj.entries() {
                let dst = &mut block[i * c..(i + 1) * c];
                for (o, xj) in dst.iter_mut().zip(&xb[j * c..(j + 1) * c]) {
                    *o += w * xj;
                }
            }
        });
        let out = Tensor::new(xv.shape(), out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::BlockLeftMul { adj, x }, ng))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[blocks·tokens, channels]`; heads take contiguous
    /// channel slices of width `channels / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let d = qv.cols();
        if shape.heads == 0 || d % shape.heads != 0 {
            return Err(Error::Config(format!(
                "{d} channels cannot be split into {} heads",
                shape.heads
            )));
        }
        if qv.rows() != shape.blocks * shape.tokens {
            return Err(Error::shape(
                "attention",
                qv.shape(),
                &[shape.blocks, shape.tokens],
            ));
        }
        let probs = attention_probs(qv.data(), kv.data(), d, shape);
        let out = attention_apply(&probs, vv.data(), d, shape);
        let out = Tensor::new(qv.shape(), out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        ))
    }

    /// Multiply by a fixed mask (already scaled by `1/(1-p)` where kept).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape("dropout", xv.shape(), &[mask.len()]));
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// `Σ_r w_r ‖pred_r − target_r‖² / denom` as a scalar node.
    pub fn mse_loss(
        &mut self,
        pred: Var,
        target: Tensor,
        row_weights: Vec<f64>,
        denom: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape("mse_loss", pv.shape(), target.shape()));
        }
        if row_weights.len() != pv.rows() || denom <= 0.0 {
            return Err(Error::Contract(format!(
                "mse_loss: {} row weights for {} rows, denominator {denom}",
                row_weights.len(),
                pv.rows()
            )));
        }
        let c = pv.cols();
        let mut total = 0.0;
        for (r, w) in row_weights.iter().enumerate() {
            let mut sq = 0.0;
            for j in 0..c {
                let e = pv.data()[r * c + j] - target.data()[r * c + j];
                sq += e * e;
            }
            total += w * sq;
        }
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::MseLoss {
                pred,
                target,
                row_weights,
                denom,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = ops::transpose(self.value(*b));
                    self.accumulate(grads, *a, ops::matmul(g, &bt)?)?;
                }
                if self.needs(*b) {
                    let at = ops::transpose(self.value(*a));
                    self.accumulate(grads, *b, ops::matmul(&at, g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(&shape, db)?)?;
                }
            }
            Op::AddTiled(x, tile) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*tile) {
                    let tv = self.value(*tile);
                    let mut dt = vec![0.0; tv.len()];
                    for block in g.data().chunks(tv.len()) {
                        for (d, b) in dt.iter_mut().zip(block) {
                            *d += b;
                        }
                    }
                    self.accumulate(grads, *tile, Tensor::new(tv.shape(), dt)?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad_scalar(xi))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let rows = g.rows();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gd[off + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[off + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gd[off + j] * gam[j];
                            dx[off + j] = rstd[r] * (dh - mean_dh - xhat[off + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dgamma[j] += gd[r * d + j] * xhat[r * d + j];
                            dbeta[j] += gd[r * d + j];
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(&gshape, dgamma)?)?;
                    self.accumulate(grads, *beta, Tensor::new(&bshape, dbeta)?)?;
                }
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((dxr, pr), gr) in dx
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = pr.iter().zip(gr).map(|(p, gi)| p * gi).sum();
                    for ((d, p), gi) in dxr.iter_mut().zip(pr).zip(gr) {
                        *d = p * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), dx)?)?;
            }
            Op::BlockLeftMul { adj, x } => {
                let n = adj.n();
                let c = g.cols();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                parallel::for_each_chunk_mut(&mut dx, n * c, |b, block| {
                    let gb = &gd[b * n * c..(b + 1) * n * c];
                    for &(i, j, w) in adj.entries() {
                        let dst = &mut block[j * c..(j + 1) * c];
                        for (o, gi) in dst.iter_mut().zip(&gb[i * c..(i + 1) * c]) {
                            *o += w * gi;
                        }
                    }
                });
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let d = g.cols();
                let (dq, dk, dv) = attention_backward(
                    probs,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g.data(),
                    d,
                    *shape,
                );
                let s = g.shape();
                self.accumulate(grads, *q, Tensor::new(s, dq)?)?;
                self.accumulate(grads, *k, Tensor::new(s, dk)?)?;
                self.accumulate(grads, *v, Tensor::new(s, dv)?)?;
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::MseLoss {
                pred,
                target,
                row_weights,
                denom,
            } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let g0 = g.data()[0];
                let mut dp = vec![0.0; pv.len()];
                for (r, w) in row_weights.iter().enumerate() {
                    for j in 0..c {
                        let e = pv.data()[r * c + j] - target.data()[r * c + j];
                        dp[r * c + j] = g0 * 2.0 * w * e / denom;
                    }
                }
                self.accumulate(grads, *pred, Tensor::new(pv.shape(), dp)?)?;
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.data()[0]))?;
            }
        }
        Ok(())
    }
}

fn attention_probs(q: &[f64], k: &[f64], d: usize, s: AttentionShape) -> Vec<f64> {
    let (n, h) = (s.tokens, s.heads);
    let dh = d / h;
    let mut probs = vec![0.0; s.blocks * h * n * n];
    parallel::for_each_chunk_mut(&mut probs, h * n * n, |b, pb| {
        let base = b * n * d;
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..n {
                let row = &mut pb[(head * n + i) * n..(head * n + i + 1) * n];
                let qi = &q[base + i * d + c0..base + i * d + c0 + dh];
                for (j, sij) in row.iter_mut().enumerate() {
                    let kj = &k[base + j * d + c0..base + j * d + c0 + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *sij = dot * s.scale;
                }
                ops::softmax_in_place(row);
            }
        }
    });
    probs
}

fn attention_apply(probs: &[f64], v: &[f64], d: usize, s: AttentionShape) -> Vec<f64> {
    let (n, h) = (s.tokens, s.heads);
    let dh = d / h;
    let mut out = vec![0.0; s.blocks * n * d];
    parallel::for_each_chunk_mut(&mut out, n * d, |b, ob| {
        let base = b * n * d;
        let pb = &probs[b * h * n * n..(b + 1) * h * n * n];
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..n {
                let prow = &pb[(head * n + i) * n..(head * n + i + 1) * n];
                let dst = &mut ob[i * d + c0..i * d + c0 + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v[base + j * d + c0..base + j * d + c0 + dh];
                    for (o, x) in dst.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    });
    out
}

fn attention_backward(
    probs: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    d: usize,
    s: AttentionShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, h) = (s.tokens, s.heads);
    let dh = d / h;
    let block = n * d;
    // Per block: [dq | dk | dv], each n·d long.
    let mut packed = vec![0.0; s.blocks * 3 * block];
    parallel::for_each_chunk_mut(&mut packed, 3 * block, |b, chunk| {
        let base = b * block;
        let pb = &probs[b * h * n * n..(b + 1) * h * n * n];
        let (dq, rest) = chunk.split_at_mut(block);
        let (dk, dv) = rest.split_at_mut(block);
        let mut ds = vec![0.0; n * n];
        for head in 0..h {
            let c0 = head * dh;
            let p = &pb[head * n * n..(head + 1) * n * n];
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), with dP = dO·Vᵀ.
            for i in 0..n {
                let doi = &dout[base + i * d + c0..base + i * d + c0 + dh];
                let mut dot = 0.0;
                for j in 0..n {
                    let vj = &v[base + j * d + c0..base + j * d + c0 + dh];
                    let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[i * n + j] = dp;
                    dot += dp * p[i * n + j];
                }
                for j in 0..n {
                    ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - dot);
                }
            }
            for i in 0..n {
                let doi = &dout[base + i * d + c0..base + i * d + c0 + dh];
                let qi = &q[base + i * d + c0..base + i * d + c0 + dh];
                for j in 0..n {
                    let pij = p[i * n + j];
                    let dsij = ds[i * n + j] * s.scale;
                    let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                    for (o, x) in dvj.iter_mut().zip(doi) {
                        *o += pij * x;
                    }
                    let kj = &k[base + j * d + c0..base + j * d + c0 + dh];
                    let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                    for (o, x) in dqi.iter_mut().zip(kj) {
                        *o += dsij * x;
                    }
                    let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                    for (o, x) in dkj.iter_mut().zip(qi) {
                        *o += dsij * x;
                    }
                }
            }
        }
    });
    let mut dq = Vec::with_capacity(s.blocks * block);
    let mut dk = Vec::with_capacity(s.blocks * block);
    let mut dv = Vec::with_capacity(s.blocks * block);
    for chunk in packed.chunks(3 * block) {
        dq.extend_from_slice(&chunk[..block]);
        dk.extend_from_slice(&chunk[block..2 * block]);
        dv.extend_from_slice(&chunk[2 * block..]);
    }
    (dq, dk, dv)
}
