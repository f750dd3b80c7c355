//! Pre-norm transformer encoder over joint tokens.
//!
//! ```text
//! Z'  = Z0 + W_pos
//! Z'' = MSA(LN(Z')) + Z'
//! Z1  = MLP(LN(Z'')) + Z''
//! ```

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, AttentionShape, Graph, Tensor, Var};
use crate::params::{LayerNormParams, Linear, Param, Parameterized};

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScaling {
    /// `1/√(d/heads)`.
    #[default]
    PerHead,
    /// `1/√d` regardless of the head count.
    FullWidth,
}

impl AttentionScaling {
    pub fn factor(self, channels: usize, heads: usize) -> f64 {
        let width = match self {
            AttentionScaling::PerHead => channels / heads,
            AttentionScaling::FullWidth => channels,
        };
        1.0 / (width as f64).sqrt()
    }
}

/// Softmax attention probabilities `softmax(Q·Kᵀ·scale)` for one head.
pub fn attention_weights(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(Error::shape("attention_weights", q.shape(), k.shape()));
    }
    let logits = ops::matmul(q, &ops::transpose(k))?.scale(scale);
    Ok(ops::softmax_rows(&logits))
}

/// Single-head `softmax(Q·Kᵀ/√d_h)·V` where `d_h` is the width of `q`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape() != v.shape() {
        return Err(Error::shape("scaled_dot_attention", q.shape(), v.shape()));
    }
    let p = attention_weights(q, k, 1.0 / (q.cols() as f64).sqrt())?;
    ops::matmul(&p, v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wout: Linear,
    /// Learned positional embedding `[J, d]`.
    pub pos: Param,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub num_heads: usize,
    pub scaling: AttentionScaling,
    pub dropout: f64,
}

/// Randomness for one training forward pass; `None` means inference.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl EncoderWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        joints: usize,
        d: usize,
        num_heads: usize,
        mlp_ratio: usize,
        qkv_bias: bool,
        ln_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !d.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "channels ({d}) must be divisible by num_heads ({num_heads})"
            )));
        }
        let hidden = mlp_ratio * d;
        Ok(EncoderWeights {
            wq: Linear::new(&format!("{name}.wq"), d, d, qkv_bias, rng),
            wk: Linear::new(&format!("{name}.wk"), d, d, qkv_bias, rng),
            wv: Linear::new(&format!("{name}.wv"), d, d, qkv_bias, rng),
            wout: Linear::new(&format!("{name}.wout"), d, d, qkv_bias, rng),
            pos: Param::new(format!("{name}.pos"), Tensor::zeros(&[joints, d])),
            ln1: LayerNormParams::new(&format!("{name}.ln1"), d, ln_eps),
            ln2: LayerNormParams::new(&format!("{name}.ln2"), d, ln_eps),
            fc1: Linear::new(&format!("{name}.fc1"), d, hidden, true, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, d, true, rng),
            num_heads,
            scaling: AttentionScaling::PerHead,
            dropout: 0.0,
        })
    }

    pub fn channels(&self) -> usize {
        self.wq.d_in()
    }

    pub fn joints(&self) -> usize {
        self.pos.value.rows()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let xv = g.value(x);
        let j = self.joints();
        if xv.cols() != self.channels() || j == 0 || !xv.rows().is_multiple_of(j) {
            return Err(Error::shape("encoder", xv.shape(), self.pos.value.shape()));
        }
        Ok(xv.rows() / j)
    }

    /// Multi-head self-attention (no positional embedding, no norm).
    pub fn msa(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let blocks = self.check_input(g, x)?;
        let d = self.channels();
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "channels ({d}) must be divisible by num_heads ({})",
                self.num_heads
            )));
        }
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let shape = AttentionShape {
            blocks,
            tokens: self.joints(),
            heads: self.num_heads,
            scale: self.scaling.factor(d, self.num_heads),
        };
        let heads = g.attention(q, k, v, shape)?;
        self.wout.forward(g, heads)
    }

    pub fn mlp(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, z0: Var, mut rng: DropoutRng<'_>) -> Result<Var> {
        self.check_input(g, z0)?;
        let pos = self.pos.bind(g);
        let z1 = g.add_tiled(z0, pos)?;

        let n1 = self.ln1.forward(g, z1)?;
        let a = self.msa(g, n1)?;
        let a = self.maybe_dropout(g, a, rng.as_deref_mut())?;
        let z2 = g.add(a, z1)?;

        let n2 = self.ln2.forward(g, z2)?;
        let m = self.mlp(g, n2)?;
        let m = self.maybe_dropout(g, m, rng)?;
        g.add(m, z2)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask = (0..g.value(x).len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                g.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self) -> u64 {
        let (j, d) = (self.joints() as u64, self.channels() as u64);
        let hidden = self.fc1.d_out() as u64;
        let projections = 4 * j * d * d;
        let scores = j * j * d;
        let mix = j * j * d;
        let mlp = 2 * j * d * hidden;
        projections + scores + mix + mlp
    }
}

impl Parameterized for EncoderWeights {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.pos];
        v.extend(self.ln1.params());
        for l in [&self.wq, &self.wk, &self.wv, &self.wout] {
            v.extend(l.params());
        }
        v.extend(self.ln2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.pos];
        v.extend(self.ln1.params_mut());
        for l in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wout] {
            v.extend(l.params_mut());
        }
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

fn run<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}

/// Multi-head self-attention on a plain `[J, d]` matrix.
pub fn msa(z: &Tensor, w: &EncoderWeights) -> Result<Tensor> {
    run(z, |g, x| w.msa(g, x))
}

/// Per-joint two-layer perceptron with GELU in between.
pub fn mlp(z: &Tensor, w: &EncoderWeights) -> Result<Tensor> {
    run(z, |g, x| w.mlp(g, x))
}

/// Full encoder layer (inference: no dropout).
pub fn encoder_forward(z0: &Tensor, w: &EncoderWeights) -> Result<Tensor> {
    run(z0, |g, x| w.forward(g, x, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{gelu, layer_norm, matmul};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomize(w: &mut EncoderWeights, seed: u64) {
        let mut r = rng(seed);
        for p in w.params_mut() {
            p.value = Tensor::uniform(p.value.shape(), 0.5, &mut r);
        }
    }

    fn linear(x: &Tensor, l: &Linear) -> Tensor {
        let y = matmul(x, &l.weight.value).unwrap();
        let b = l.bias.as_ref().unwrap().value.clone();
        let mut out = y.clone();
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                out.set(r, c, y.get(r, c) + b.data()[c]);
            }
        }
        out
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut r = rng(1);
        let q = Tensor::uniform(&[1, 4], 1.0, &mut r);
        let k = Tensor::uniform(&[1, 4], 1.0, &mut r);
        let v = Tensor::uniform(&[1, 4], 1.0, &mut r);
        assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let row = [0.3, -1.2, 0.8];
        let x = Tensor::from_rows(&[row, row, row]);
        let y = scaled_dot_attention(&x, &x, &x).unwrap();
        for r in 1..3 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn two_token_hand_expansion() {
        let q = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        let k = Tensor::from_rows(&[[0.5, 1.0], [1.0, -1.0]]);
        let v = Tensor::from_rows(&[[1.0, 2.0], [3.0, -4.0]]);
        let s = 1.0 / 2f64.sqrt();
        let mut oracle = Tensor::zeros(&[2, 2]);
        for i in 0..2 {
            let l0 = (q.get(i, 0) * k.get(0, 0) + q.get(i, 1) * k.get(0, 1)) * s;
            let l1 = (q.get(i, 0) * k.get(1, 0) + q.get(i, 1) * k.get(1, 1)) * s;
            let (e0, e1) = (l0.exp(), l1.exp());
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for c in 0..2 {
                oracle.set(i, c, p0 * v.get(0, c) + p1 * v.get(1, c));
            }
        }
        let y = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(2);
        let q = Tensor::uniform(&[6, 4], 3.0, &mut r);
        let k = Tensor::uniform(&[6, 4], 3.0, &mut r);
        let p = attention_weights(&q, &k, 0.5).unwrap();
        for i in 0..6 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let err = EncoderWeights::new("e", 3, 6, 4, 2, true, 1e-5, &mut rng(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_head_reduces_to_plain_attention() {
        let mut w = EncoderWeights::new("e", 3, 4, 1, 2, true, 1e-5, &mut rng(3)).unwrap();
        randomize(&mut w, 4);
        let z = Tensor::uniform(&[3, 4], 1.0, &mut rng(5));
        let q = linear(&z, &w.wq);
        let k = linear(&z, &w.wk);
        let v = linear(&z, &w.wv);
        let oracle = linear(&scaled_dot_attention(&q, &k, &v).unwrap(), &w.wout);
        assert!(msa(&z, &w).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn two_heads_match_channel_slicing() {
        let mut w = EncoderWeights::new("e", 3, 4, 2, 2, true, 1e-5, &mut rng(6)).unwrap();
        randomize(&mut w, 7);
        let z = Tensor::uniform(&[3, 4], 1.0, &mut rng(8));
        let (q, k, v) = (linear(&z, &w.wq), linear(&z, &w.wk), linear(&z, &w.wv));
        let heads: Vec<Tensor> = (0..2)
            .map(|h| {
                scaled_dot_attention(
                    &q.slice_cols(2 * h, 2),
                    &k.slice_cols(2 * h, 2),
                    &v.slice_cols(2 * h, 2),
                )
                .unwrap()
            })
            .collect();
        let oracle = linear(&Tensor::concat_cols(&heads).unwrap(), &w.wout);
        assert!(msa(&z, &w).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn full_width_scaling_changes_multi_head_output() {
        let mut w = EncoderWeights::new("e", 3, 4, 2, 2, true, 1e-5, &mut rng(6)).unwrap();
        randomize(&mut w, 7);
        let z = Tensor::uniform(&[3, 4], 1.0, &mut rng(8));
        let per_head = msa(&z, &w).unwrap();
        w.scaling = AttentionScaling::FullWidth;
        assert!(msa(&z, &w).unwrap().max_abs_diff(&per_head) > 1e-6);
    }

    #[test]
    fn mlp_examples() {
        let mut w = EncoderWeights::new("e", 4, 4, 2, 2, true, 1e-5, &mut rng(9)).unwrap();
        for p in w.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let z = Tensor::uniform(&[4, 4], 1.0, &mut rng(10));
        assert_eq!(mlp(&z, &w).unwrap(), Tensor::zeros(&[4, 4]));

        randomize(&mut w, 11);
        let oracle = linear(&gelu(&linear(&z, &w.fc1)), &w.fc2);
        let y = mlp(&z, &w).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-12);

        let mut z2 = z.clone();
        for c in 0..4 {
            z2.set(2, c, 0.0);
        }
        let y2 = mlp(&z2, &w).unwrap();
        for r in 0..4 {
            assert_eq!(y2.row(r) == y.row(r), r != 2);
        }
    }

    #[test]
    fn zero_sublayers_pass_residual_through() {
        let mut w = EncoderWeights::new("e", 3, 4, 2, 2, true, 1e-5, &mut rng(12)).unwrap();
        let mut r = rng(13);
        for p in w.params_mut() {
            let name = p.name.clone();
            p.value = if name.ends_with(".pos") {
                Tensor::uniform(p.value.shape(), 1.0, &mut r)
            } else if name.ends_with(".gamma") {
                Tensor::ones(p.value.shape())
            } else {
                Tensor::zeros(p.value.shape())
            };
        }
        let z0 = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let y = encoder_forward(&z0, &w).unwrap();
        assert_eq!(y, z0.add(&w.pos.value).unwrap());
    }

    #[test]
    fn encoder_matches_sequential_composition() {
        let mut w = EncoderWeights::new("e", 3, 4, 2, 2, true, 1e-5, &mut rng(14)).unwrap();
        randomize(&mut w, 15);
        let z0 = Tensor::uniform(&[3, 4], 1.0, &mut rng(16));
        let ln = |x: &Tensor, p: &LayerNormParams| {
            layer_norm(x, &p.gamma.value, &p.beta.value, p.eps).unwrap()
        };
        let z1 = z0.add(&w.pos.value).unwrap();
        let z2 = msa(&ln(&z1, &w.ln1), &w).unwrap().add(&z1).unwrap();
        let z3 = mlp(&ln(&z2, &w.ln2), &w).unwrap().add(&z2).unwrap();
        let y = encoder_forward(&z0, &w).unwrap();
        assert!(y.max_abs_diff(&z3) < 1e-12);
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut w = EncoderWeights::new("e", 6, 8, 2, 2, true, 1e-5, &mut rng(17)).unwrap();
        randomize(&mut w, 18);
        let z = Tensor::uniform(&[6, 8], 1.0, &mut rng(19));
        let y = msa(&z, &w).unwrap();
        let mut r = rng(20);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut r);
            let zp =
                Tensor::concat_rows(&perm.iter().map(|&i| z.slice_rows(i, 1)).collect::<Vec<_>>())
                    .unwrap();
            let yp = msa(&zp, &w).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                let diff = yp
                    .row(new)
                    .iter()
                    .zip(y.row(old))
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(diff < 1e-10);
            }
        }
    }

    #[test]
    fn dropout_only_applies_with_rng() {
        let mut w = EncoderWeights::new("e", 3, 4, 2, 2, true, 1e-5, &mut rng(21)).unwrap();
        randomize(&mut w, 22);
        w.dropout = 0.5;
        let z0 = Tensor::uniform(&[3, 4], 1.0, &mut rng(23));
        let inference = encoder_forward(&z0, &w).unwrap();
        let mut g = Graph::new();
        let x = g.constant(z0.clone());
        let mut r = rng(24);
        let y = w.forward(&mut g, x, Some(&mut r)).unwrap();
        assert!(g.value(y).max_abs_diff(&inference) > 1e-6);
    }
}
