//! First-order optimizer state shared by dream and model updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub const DREAM: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::DREAM
    }
}

/// Adam moments with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// Folds `grad` into the moments and returns `m_hat / (sqrt(v_hat) + eps)`.
    pub fn direction(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam",
                left: vec![self.m.len()],
                right: vec![grad.len()],
            });
        }
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grad.len());
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            out.push((*m / c1) / ((*v / c2).sqrt() + epsilon));
        }
        Ok(out)
    }
}

/// Heavy-ball SGD: `v <- mu v + g; p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_unit_magnitude() {
        let mut s = AdamState::new(3, AdamConfig::DREAM);
        let d = s.direction(&[0.5, -2.0, 1e-3]).unwrap();
        for (x, g) in d.iter().zip([0.5f64, -2.0, 1e-3]) {
            assert!((x - g.signum()).abs() < 1e-4, "{x}");
        }
        assert_eq!(s.t, 1);
        assert!(s.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut o = SgdMomentum::new(1, 0.1, 0.9);
        let mut p = [1.0];
        o.step(&mut p, &[1.0]);
        o.step(&mut p, &[1.0]);
        assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }
}
