//! Named trainable tensors and the small building blocks shared by layers.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// A trainable tensor with a unique dotted name such as `layers.0.enc.wq.w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.param(&self.name, &self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters. Both methods must list parameters in the
/// same order; optimizer state and checkpoints rely on it.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Per-row affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Weights uniform in `±1/√in`, bias zero.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Param::new(
                format!("{name}.w"),
                Tensor::uniform(&[d_in, d_out], bound, rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = b.bind(g);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(name: &str, d: usize, eps: f64) -> Self {
        LayerNormParams {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

impl Parameterized for LayerNormParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_two_to_four_has_twelve_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new("proj", 2, 4, true, &mut rng);
        assert_eq!(l.num_params(), 12);
    }

    #[test]
    fn linear_init_is_bounded_and_seeded() {
        let a = Linear::new("p", 16, 8, true, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Linear::new("p", 16, 8, true, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.weight.value.max_abs() <= 0.25);
        assert_eq!(a.bias.unwrap().value, Tensor::zeros(&[8]));
    }
}
