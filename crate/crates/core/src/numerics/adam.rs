use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. The default learning rate is the finetuning rate of 1e-4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter tensor plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s.to_vec()), Tensor::zeros(s.to_vec())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), self.m[i].shape()),
                ));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let bc1 = T::from_f64(1.0 - beta1.powi(t));
        let bc2 = T::from_f64(1.0 - beta2.powi(t));
        let (lr, b1, b2, eps) = (T::from_f64(lr), T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
        let one = T::one();

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (one - b1) * gj;
                vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Clears moments and the step count, keeping hyperparameters.
    pub fn reset(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        self.t = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> AdamState<f64> {
        AdamState::new(AdamConfig { lr, ..Default::default() }, [&[1usize][..]])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_state(1e-3);
        let mut p = vec![Tensor::full([1], 0.75)];
        s.step(&mut p, &[Tensor::zeros([1])]).unwrap();
        assert_eq!(p[0].data(), &[0.75]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut s = scalar_state(1e-4);
            let mut p = vec![Tensor::full([1], 1.0)];
            s.step(&mut p, &[Tensor::full([1], g)]).unwrap();
            let delta = p[0].data()[0] - 1.0;
            assert!((delta + 1e-4 * f64::signum(g)).abs() < 1e-9, "{delta}");
        }
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        // f(x) = (x - 2)^2, gradient 2(x - 2)
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = 5.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (x - 2.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            reference.push(x);
        }

        let mut s = scalar_state(lr);
        let mut p = vec![Tensor::full([1], 5.0)];
        for want in reference {
            let g = 2.0 * (p[0].data()[0] - 2.0);
            s.step(&mut p, &[Tensor::full([1], g)]).unwrap();
            assert!((p[0].data()[0] - want).abs() < 1e-7);
        }
        assert_eq!(s.t, 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = scalar_state(1e-3);
        let mut p = vec![Tensor::full([1], 1.0)];
        assert!(s.step(&mut p, &[Tensor::zeros([2])]).is_err());
        assert!(s.step(&mut p, &[]).is_err());
        assert_eq!(s.t, 0);
    }
}
