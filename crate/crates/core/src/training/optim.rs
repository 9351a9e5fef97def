use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParameterStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParameterStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors but the store has {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let step = lr / (1.0 - self.beta1.powi(t));
        let vcorr = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let (step, vcorr, eps) = (T::of(step), T::of(vcorr), T::of(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *w -= step * *m / ((*v * vcorr).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParameterStore<T>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.add("theta", Tensor::full(&[1], v)).unwrap();
        s
    }

    /// Independent scalar re-derivation of the update rule.
    fn reference_adam(theta0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn quadratic_converges_and_matches_reference() {
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(&s, AdamConfig::default());
        let id = s.ids().next().unwrap();
        for _ in 0..200 {
            let th = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] = 2.0 * th;
            opt.update(&mut s, 0.1).unwrap();
        }
        let th = s.value(id).data()[0];
        assert!(th.abs() < 0.05, "{th}");
        assert!((th - reference_adam(1.0, 0.1, 200)).abs() < 1e-12);
        assert_eq!(opt.step, 200);
    }

    #[test]
    fn zero_gradient_or_zero_lr_leaves_weights() {
        let mut s = scalar_store(0.7);
        let id = s.ids().next().unwrap();
        let mut opt = Adam::new(&s, AdamConfig::default());
        opt.update(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
        s.grad_mut(id).data_mut()[0] = 3.0;
        opt.update(&mut s, 0.0).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
        assert!(opt.moments().0[0].data()[0] != 0.0);
        assert!(opt.moments().1[0].data()[0] != 0.0);
        opt.update(&mut s, 1e-3).unwrap();
        assert!(s.value(id).data()[0] != 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        let id = s.ids().next().unwrap();
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(&s, AdamConfig::default());
        let err = opt.update(&mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("theta")));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut s = ParameterStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        let b = s.add("b", Tensor::zeros(&[1])).unwrap();
        s.grad_mut(a).data_mut().copy_from_slice(&[3.0, 0.0]);
        s.grad_mut(b).data_mut()[0] = 4.0;
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad(a).data()[0] - 0.6).abs() < 1e-15);
        assert!((s.grad(b).data()[0] - 0.8).abs() < 1e-15);
    }
}
