//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Moment state over a flat parameter vector. Ranges of the vector may use
/// different learning rates and weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub params: AdamWParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(len: usize, params: AdamWParams) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Advances the step counter; call once before updating the groups of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// `θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)` over `range`.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], range: Range<usize>, lr: f64, weight_decay: f64) {
        let AdamWParams { beta1, beta2, eps, .. } = self.params;
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in range {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * theta[i]);
        }
    }

    /// One step over the whole vector with the configured weight decay.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.begin_step();
        let wd = self.params.weight_decay;
        self.update(theta, grad, 0..theta.len(), lr, wd);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
        assert!((cosine_lr(2e-4, 50, 100) - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(2e-4, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr · sign(g).
        let mut opt = AdamW::new(2, AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut th = vec![1.0, -1.0];
        opt.step(&mut th, &[3.0, -0.5], 0.1);
        assert!((th[0] - 0.9).abs() < 1e-6);
        assert!((th[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(1, AdamWParams {
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut th = vec![2.0];
        opt.step(&mut th, &[0.0], 0.1);
        assert!((th[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(3, AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        });
        let target = [1.0, -2.0, 0.5];
        let mut th = vec![0.0; 3];
        for s in 0..2000 {
            let g: Vec<f64> = th.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut th, &g, cosine_lr(0.05, s, 2000));
        }
        for (a, b) in th.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
