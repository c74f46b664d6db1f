//! Adaptive moment estimation with decoupled weight decay and a cosine
//! learning-rate decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{flatten, param_count, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self { base_lr, total_steps, ..Self::default() }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            total_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-12,
        }
    }
}

/// Cosine-decayed learning rate `base · ½(1 + cos(π s / total))`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    let frac = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: OptimizerConfig,
    pub step: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptState {
    pub fn new<P: ParamSet + ?Sized>(config: OptimizerConfig, params: &P) -> Result<Self> {
        if config.total_steps == 0 {
            return Err(Error::invalid("optimizer needs total_steps >= 1"));
        }
        if config.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        let n = param_count(params);
        Ok(Self {
            config,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        })
    }

    pub fn learning_rate(&self) -> f64 {
        cosine_lr(self.config.base_lr, self.step, self.config.total_steps)
    }

    /// Applies one update in place and returns the learning rate used.
    ///
    /// Parameters are left untouched when the gradient contains a non-finite
    /// entry.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<f64> {
        if self.step >= self.config.total_steps {
            return Err(Error::invalid(format!(
                "optimizer already ran its {} scheduled steps",
                self.config.total_steps
            )));
        }
        let g = flatten(grads);
        if g.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "{} gradient entries for {} moment entries",
                g.len(),
                self.first_moment.len()
            )));
        }
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {k}")));
        }

        let OptimizerConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let lr = self.learning_rate();
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((m, v), gv) in self.first_moment.iter_mut().zip(self.second_moment.iter_mut()).zip(&g) {
            *m = beta1 * *m + (1.0 - beta1) * gv;
            *v = beta2 * *v + (1.0 - beta2) * gv * gv;
        }

        let (first, second) = (&self.first_moment, &self.second_moment);
        let mut offset = 0;
        params.visit_mut("", &mut |_, _, data| {
            for (k, p) in data.iter_mut().enumerate() {
                let idx = offset + k;
                let m_hat = first[idx] / bias1;
                let v_hat = second[idx] / bias2;
                *p -= lr * weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += data.len();
        });
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::mlp::{Activation, Mlp};
    use crate::diffcore::params::flatten;

    #[test]
    fn zero_gradients_without_decay_leave_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(&[3, 4, 2], Activation::Silu, &mut rng);
        let before = flatten(&mlp);
        let mut cfg = OptimizerConfig::new(1e-3, 10);
        cfg.weight_decay = 0.0;
        let mut opt = OptState::new(cfg, &mlp).unwrap();
        let zeros = mlp.zeros_like();
        for _ in 0..5 {
            opt.step(&mut mlp, &zeros).unwrap();
        }
        assert_eq!(flatten(&mlp), before);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 1000), 1e-4);
        assert!(cosine_lr(1e-4, 1000, 1000).abs() < 1e-12);
        let opt = OptState::new(OptimizerConfig::default(), &crate::diffcore::params::Scalar(0.0)).unwrap();
        assert_eq!(opt.learning_rate(), 1e-4);
    }

    #[test]
    fn schedule_is_nonincreasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=500 {
            let lr = cosine_lr(3e-4, s, 500);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn nonfinite_gradient_is_rejected_without_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::new(&[2, 2], Activation::Silu, &mut rng);
        let before = flatten(&mlp);
        let mut g = mlp.zeros_like();
        g.layers_mut()[0].weight = Array2::from_elem((2, 2), f64::NAN);
        let mut opt = OptState::new(OptimizerConfig::new(1e-3, 4), &mlp).unwrap();
        assert!(matches!(opt.step(&mut mlp, &g), Err(Error::NonFinite(_))));
        assert_eq!(flatten(&mlp), before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn refuses_to_step_past_schedule() {
        let mut p = crate::diffcore::params::Scalar(1.0);
        let g = crate::diffcore::params::Scalar(0.5);
        let mut opt = OptState::new(OptimizerConfig::new(1e-2, 2), &p).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!(opt.step(&mut p, &g).is_err());
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        // with bias correction the first step is lr * g/|g| (up to eps)
        let mut p = crate::diffcore::params::Scalar(1.0);
        let g = crate::diffcore::params::Scalar(0.3);
        let mut cfg = OptimizerConfig::new(1e-2, 100);
        cfg.weight_decay = 0.0;
        let mut opt = OptState::new(cfg, &p).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.0 - (1.0 - 1e-2)).abs() < 1e-9);
    }

    #[test]
    fn decay_shrinks_parameters_directly() {
        let mut p = crate::diffcore::params::Scalar(2.0);
        let g = crate::diffcore::params::Scalar(0.0);
        let mut cfg = OptimizerConfig::new(0.1, 10);
        cfg.weight_decay = 0.5;
        let mut opt = OptState::new(cfg, &p).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.0 - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }
}
