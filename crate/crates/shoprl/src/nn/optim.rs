//! Adam with linear warmup and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::ShopError;
use crate::nn::params::{GradStore, ParamId, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    m: GradStore<S>,
    v: GradStore<S>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<S>) -> Self {
        Adam {
            cfg,
            m: GradStore::zeros_like(params),
            v: GradStore::zeros_like(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate after the linear warmup ramp at step `t` (1-based).
    pub fn effective_lr(cfg: &AdamConfig, t: u64) -> f64 {
        if cfg.warmup_steps > 0 && t < cfg.warmup_steps {
            cfg.learning_rate * t as f64 / cfg.warmup_steps as f64
        } else {
            cfg.learning_rate
        }
    }

    /// One bias-corrected update. The caller is responsible for gradient
    /// clipping; non-finite gradients are refused.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &GradStore<S>) -> Result<(), ShopError> {
        if !grads.is_finite() {
            return Err(ShopError::Contract("non-finite gradients fed to adam".into()));
        }
        self.t += 1;
        let lr = S::from_f64_c(Self::effective_lr(&self.cfg, self.t));
        let b1 = S::from_f64_c(self.cfg.beta1);
        let b2 = S::from_f64_c(self.cfg.beta2);
        let eps = S::from_f64_c(self.cfg.epsilon);
        let wd = S::from_f64_c(self.cfg.weight_decay);
        let one = S::one();
        let bc1 = one - S::from_f64_c(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - S::from_f64_c(self.cfg.beta2.powi(self.t as i32));

        for id in 0..params.n_tensors() {
            let id = ParamId(id);
            let g = grads.tensor(id);
            let m = self.m.tensor_mut(id);
            let v = self.v.tensor_mut(id);
            let p = params.tensor_mut(id);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
                if wd > S::zero() {
                    p[i] = p[i] - lr * wd * p[i];
                }
            }
        }
        if !params.is_finite() {
            return Err(ShopError::Numeric("parameters became non-finite after update".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::TensorSpec;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::zeros(vec![TensorSpec::vector("w", 1)]);
        p.tensor_mut(ParamId(0))[0] = value;
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(0.3);
        let grads = GradStore::zeros_like(&params);
        let mut adam = Adam::new(AdamConfig::new(0.1), &params);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params.tensor(ParamId(0))[0], 0.3);
    }

    #[test]
    fn first_step_matches_hand_evaluated_recurrence() {
        // g = 1, t = 1: m_hat = 1, v_hat = 1, update = -lr / (1 + eps).
        let lr = 0.05;
        let eps = 1e-8;
        let mut params = one_param(1.0);
        let mut grads = GradStore::zeros_like(&params);
        grads.tensor_mut(ParamId(0))[0] = 1.0;
        let mut cfg = AdamConfig::new(lr);
        cfg.epsilon = eps;
        let mut adam = Adam::new(cfg, &params);
        adam.step(&mut params, &grads).unwrap();
        let expected = 1.0 - lr / (1.0 + eps);
        assert!((params.tensor(ParamId(0))[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramp_is_linear() {
        let mut cfg = AdamConfig::new(2e-3);
        cfg.warmup_steps = 100;
        assert_eq!(Adam::<f64>::effective_lr(&cfg, 50), 1e-3);
        assert_eq!(Adam::<f64>::effective_lr(&cfg, 100), 2e-3);
        assert_eq!(Adam::<f64>::effective_lr(&cfg, 5000), 2e-3);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_parameters() {
        let mut cfg = AdamConfig::new(0.1);
        cfg.weight_decay = 0.5;
        let mut params = one_param(2.0);
        let grads = GradStore::zeros_like(&params);
        let mut adam = Adam::new(cfg, &params);
        adam.step(&mut params, &grads).unwrap();
        // Zero gradient, so the only movement is -lr * wd * p.
        assert!((params.tensor(ParamId(0))[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_are_refused() {
        let mut params = one_param(1.0);
        let mut grads = GradStore::zeros_like(&params);
        grads.tensor_mut(ParamId(0))[0] = f64::NAN;
        let mut adam = Adam::new(AdamConfig::new(0.1), &params);
        assert!(adam.step(&mut params, &grads).is_err());
    }
}
