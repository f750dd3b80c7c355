//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "adam needs 0 <= beta < 1 and eps > 0, got {self:?}"
            )))
        }
    }
}

/// First and second moments for each parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        OptimizerState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(p: &mut Tensor, g: &Tensor, s: &mut OptimizerState, lr: f64) {
        adam_step(
            &mut [p],
            std::slice::from_ref(g),
            s,
            lr,
            &AdamConfig::default(),
        )
        .unwrap();
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut p = Tensor::scalar(1.0);
            let mut s = OptimizerState::new([&p]);
            step(&mut p, &Tensor::scalar(g), &mut s, 1e-3);
            let delta = p.data()[0] - 1.0;
            assert!(
                (delta + 1e-3 * f64::signum(g)).abs() < 1e-6 * 1e-3,
                "{delta}"
            );
        }
    }

    #[test]
    fn two_steps_on_a_quadratic_match_scalar_reference() {
        // f(x) = (x − 3)², gradient 2(x − 3).
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = Tensor::scalar(0.0);
        let mut s = OptimizerState::new([&p]);
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * (p.data()[0] - 3.0));
            step(&mut p, &g, &mut s, lr);
        }
        assert!((p.data()[0] - x).abs() < 1e-15);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn mismatches_are_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut s = OptimizerState::new([&p]);
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut s, 1e-3, &cfg).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut s, 1e-3, &cfg).is_err());
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut s, 0.0, &cfg).is_err());
        assert_eq!(s.step, 0);
    }

    proptest! {
        #[test]
        fn zero_gradient_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..5) {
            let mut p = Tensor::new(&[vals.len()], vals.clone()).unwrap();
            let mut s = OptimizerState::new([&p]);
            let z = Tensor::zeros(&[vals.len()]);
            for _ in 0..steps {
                step(&mut p, &z, &mut s, 0.01);
            }
            prop_assert_eq!(p.data(), &vals[..]);
            prop_assert_eq!(&s.m[0], &z);
            prop_assert_eq!(&s.v[0], &z);
        }
    }
}
