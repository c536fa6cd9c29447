//! Adam with bias correction and a cosine-annealed learning rate.

use super::params::{GradientTape, NetworkParams};
use crate::error::{Error, Result};
use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
}

impl AdamConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, total_steps }
    }

    /// `lr₀ · ½ (1 + cos(π t / T))`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = step as f64 / self.total_steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// First and second moments, kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &NetworkParams<T>) -> Self {
        let n = params.num_values();
        Adam { config, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Applies update number `step` (0-based).
    pub fn step<T: Real>(&mut self, params: &mut NetworkParams<T>, tape: &GradientTape<T>, step: usize) -> Result<()> {
        let c = self.config;
        if step >= c.total_steps {
            return Err(Error::Config(format!("step {step} beyond schedule of {} steps", c.total_steps)));
        }
        let lr = c.learning_rate(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(tape.grads.tensors()) {
            for (w, gv) in p.iter_mut().zip(g) {
                let gv = gv.f64();
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gv;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gv * gv;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *w = T::of(w.f64() - update);
                k += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Gains;

    #[test]
    fn schedule_endpoints() {
        let c = AdamConfig::new(5e-4, 100);
        assert_eq!(c.learning_rate(0), 5e-4);
        assert!(c.learning_rate(100).abs() < 1e-20);
        assert!((c.learning_rate(50) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = NetworkParams::<f64>::random(1, 3, Gains::default());
        let before = p.clone();
        let tape = GradientTape::for_params(&p);
        let mut adam = Adam::new(AdamConfig::new(5e-4, 10), &p);
        adam.step(&mut p, &tape, 0).unwrap();
        assert_eq!(p, before);
        assert!(adam.step(&mut p, &tape, 10).is_err());
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = NetworkParams::<f64>::init(1, 3, Gains::default());
        let before = p.clone();
        let mut tape = GradientTape::for_params(&p);
        for t in tape.grads.tensors_mut() {
            t.fill(1.0);
        }
        let c = AdamConfig::new(5e-4, 10);
        let mut adam = Adam::new(c, &p);
        adam.step(&mut p, &tape, 0).unwrap();
        // m̂ = 1, v̂ = 1, so every weight moves by lr / (1 + ε).
        let want = 5e-4 / (1.0 + 1e-8);
        for (a, b) in p.tensors().into_iter().flatten().zip(before.tensors().into_iter().flatten()) {
            assert!(((b - a) - want).abs() < 1e-11 * want);
        }
        let (m, v) = adam.moments();
        assert!((m[0] - 0.1).abs() < 1e-15 && (v[0] - 0.001).abs() < 1e-15);
    }
}
