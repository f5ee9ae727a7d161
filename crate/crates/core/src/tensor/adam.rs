use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Result, TggError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TggError::Dimension {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            if p.numel() != g.numel() {
                return Err(TggError::Dimension {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, (w, &gk)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = store(1.25);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &s);
        for _ in 0..5 {
            adam.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(s.values()[0].item(), 1.25);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // t=1: m = (1-b1) g, v = (1-b2) g², mhat = g, vhat = g², step = lr g/(|g|+eps)
        let g = 0.37;
        let mut s = store(0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &s);
        adam.step(&mut s, &[Tensor::scalar(g)]).unwrap();
        let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
        assert!((s.values()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = store(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &s);
        for _ in 0..200 {
            let w = s.values()[0].item();
            adam.step(&mut s, &[Tensor::scalar(2.0 * (w - 3.0))]).unwrap();
        }
        let w = s.values()[0].item();
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }
}
