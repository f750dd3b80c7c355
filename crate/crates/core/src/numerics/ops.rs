//! Forward kernels shared by the tape and by the plain-tensor API.

use crate::error::{Error, Result};
use crate::parallel;

use super::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `C = A·B` for row-major matrices.
///
/// Every output element accumulates `A[i,p]·B[p,j]` for `p = 0..k` in order,
/// so the result does not depend on how rows are scheduled across threads.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    if n > 0 {
        matmul_into(a.data(), b.data(), &mut out, k, n);
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    // Group rows so each parallel task does a reasonable amount of work.
    let rows_per_task = (16384 / (n * k.max(1))).max(1);
    parallel::for_each_chunk_mut(out, rows_per_task * n, |task, chunk| {
        let first_row = task * rows_per_task;
        for (r, c_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = &a[(first_row + r) * k..(first_row + r + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (c, &b_pj) in c_row.iter_mut().zip(b_row) {
                    *c += a_ip * b_pj;
                }
            }
        }
    });
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transpose preserves length")
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let c = m.cols();
    let mut out = m.data().to_vec();
    if c > 0 {
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    Tensor::new(m.shape(), out).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact (erf) GELU on a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx [x·Φ(x)] = Φ(x) + x·φ(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Per-row statistics kept for the backward pass.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalise each row over the last dimension, then apply `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if d == 0 || eps <= 0.0 {
        return Err(Error::Contract(format!(
            "layer_norm needs d >= 1 and eps > 0 (d = {d}, eps = {eps})"
        )));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; rows * d];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (row[j] - mean) * s;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, rstd }))
}
