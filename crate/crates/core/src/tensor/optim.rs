//! Adaptive-moment optimizer with coupled or decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

/// Optimizer hyperparameters. `decoupled` selects AdamW-style weight decay
/// (applied directly to the parameter) instead of folding decay into the
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl OptimConfig {
    /// Adam settings used for adversarial training runs.
    pub fn adam_gan() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2e-5,
            decoupled: false,
        }
    }

    /// AdamW settings used for distillation runs.
    pub fn adamw_distill() -> Self {
        OptimConfig {
            lr: 7.5e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.025,
            decoupled: true,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.eps <= 0.0 {
            return Err(Error::domain(format!(
                "optimizer: lr and eps must be positive (lr={}, eps={})",
                self.lr, self.eps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::domain(format!(
                "optimizer: betas must lie in [0, 1) (beta1={}, beta2={})",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::domain(format!(
                "optimizer: weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment state plus the step counter.
pub struct Adam {
    cfg: OptimConfig,
    step: u64,
    moments: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, step: 0, moments: None })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// One update over `params`, consuming their accumulated gradients.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.moments.is_none() {
            self.moments = Some(
                params
                    .iter()
                    .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                    .collect(),
            );
        }
        let moments = self.moments.as_mut().unwrap();
        if moments.len() != params.len() || moments.iter().zip(params).any(|(m, p)| m.0.len() != p.len())
        {
            return Err(Error::contract(
                "optimizer: parameter list changed shape between steps".to_string(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (param, (m, v)) in params.iter().zip(moments.iter_mut()) {
            let Some(grad) = param.grad() else { continue };
            let mut data = param.to_vec();
            for i in 0..data.len() {
                let mut g = grad[i];
                if !self.cfg.decoupled && self.cfg.weight_decay != 0.0 {
                    g += self.cfg.weight_decay * data[i];
                }
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut next = data[i];
                if self.cfg.decoupled && self.cfg.weight_decay != 0.0 {
                    next -= self.cfg.lr * self.cfg.weight_decay * next;
                }
                next -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                data[i] = next;
            }
            param.set_data(data);
        }
        Ok(())
    }

    /// Clears gradients on all listed parameters.
    pub fn zero_grad(params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor {
        Tensor::param(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let p = param(1.5);
        p.accumulate_grad(&[0.0]);
        let mut opt = Adam::new(OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::adam_gan()
        })
        .unwrap();
        opt.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // g=1, lr=0.1, betas 0.5/0.999: m=0.5, v=0.001, mhat=1, vhat=1.
        let p = param(2.0);
        p.accumulate_grad(&[1.0]);
        let cfg = OptimConfig {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        };
        let mut opt = Adam::new(cfg).unwrap();
        opt.step(&[p.clone()]).unwrap();
        let expected = 2.0 - 0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((p.to_vec()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_parameter() {
        let p = param(4.0);
        p.accumulate_grad(&[0.0]);
        let cfg = OptimConfig {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.025,
            decoupled: true,
        };
        let mut opt = Adam::new(cfg).unwrap();
        opt.step(&[p.clone()]).unwrap();
        // Zero gradient: only the decay term acts.
        assert!((p.to_vec()[0] - 4.0 * (1.0 - 0.1 * 0.025)).abs() < 1e-15);
    }

    #[test]
    fn shape_drift_is_contract_error() {
        let p = param(1.0);
        let q = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut opt = Adam::new(OptimConfig::adam_gan()).unwrap();
        opt.step(&[p.clone()]).unwrap();
        let err = opt.step(&[q]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
