//! Adaptive-moment optimizer with decoupled weight decay, plus the cosine
//! learning-rate schedule used by the training loop.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[&Tensor]) -> Self {
        AdamW {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Decay is decoupled: parameters shrink by `lr * wd * p`
    /// independently of the moment estimates.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract("optimizer parameter count mismatch".into()));
        }
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape != g.shape {
                return Err(Error::Contract("gradient shape mismatch".into()));
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` to `lr_final` over `total` steps.
pub fn cosine_lr(step: u64, total: u64, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]);
        let g = Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.5]);
        let snapshot = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]);
        opt.step(&mut [&mut p], &[g], 0.0).unwrap();
        assert_eq!(p, snapshot);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize 0.5 * x^2; gradient is x.
        let mut p = Tensor::from_vec(1, 1, vec![5.0]);
        let mut opt =
            AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[&p]);
        for _ in 0..500 {
            let g = p.clone();
            opt.step(&mut [&mut p], &[g], 0.05).unwrap();
        }
        assert!(p.data[0].abs() < 0.05, "x={}", p.data[0]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient, the only movement is the decay shrinkage.
        let mut p = Tensor::from_vec(1, 1, vec![2.0]);
        let g = Tensor::zeros(1, 1);
        let mut opt =
            AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() }, &[&p]);
        opt.step(&mut [&mut p], &[g], 0.5).unwrap();
        assert!((p.data[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 2e-5), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 2e-5) - 2e-5).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 1e-4, 2e-5);
        assert!((mid - (2e-5 + 0.5 * 8e-5)).abs() < 1e-12);
        // Monotone decreasing.
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1e-4, 2e-5);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
