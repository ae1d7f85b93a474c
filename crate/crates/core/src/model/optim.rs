use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::scalar::Scalar;

/// Switch to `target` once `after_updates` parameter updates have been made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrBoost {
    pub target: f64,
    pub after_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boost: Option<LrBoost>,
    pub momentum: f64,
    pub l2: f64,
    /// Epochs (0-based) from which the rate is divided by a further 10.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(with = "crate::seed_serde")]
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 20 epochs, warm start at 0.01 boosted to 0.1
    /// after 400 updates, decays at epochs 10 and 15.
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            base_lr: 0.01,
            boost: Some(LrBoost {
                target: 0.1,
                after_updates: 400,
            }),
            momentum: 0.9,
            l2: 1e-4,
            decay_epochs: vec![10, 15],
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// 40 epochs at 0.01, decays at 20 and 30, L2 5e-4, no augmentation.
    pub fn svhn_recipe() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            base_lr: 0.01,
            boost: None,
            momentum: 0.9,
            l2: 5e-4,
            decay_epochs: vec![20, 30],
            seed: 0,
            augment: false,
        }
    }

    /// 100 epochs, 0.01 boosted to 0.1 after 400 updates, decays at 50 and
    /// 75, L2 1e-4, flip-and-crop augmentation.
    pub fn cifar_recipe() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            base_lr: 0.01,
            boost: Some(LrBoost {
                target: 0.1,
                after_updates: 400,
            }),
            momentum: 0.9,
            l2: 1e-4,
            decay_epochs: vec![50, 75],
            seed: 0,
            augment: true,
        }
    }

    /// The CIFAR recipe lengthened for Fourier-augmented training sets:
    /// 120 epochs with decays at 60 and 80.
    pub fn cifar_augmented_recipe() -> Self {
        TrainConfig {
            epochs: 120,
            decay_epochs: vec![60, 80],
            ..Self::cifar_recipe()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "svhn" => Ok(Self::svhn_recipe()),
            "cifar" => Ok(Self::cifar_recipe()),
            "cifar-augmented" => Ok(Self::cifar_augmented_recipe()),
            other => Err(Error::Config(format!(
                "unknown training preset '{other}' (expected desk, svhn, cifar or cifar-augmented)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("decay epochs must be strictly increasing".into()));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!("decay epoch {last} beyond {} epochs", self.epochs)));
            }
        }
        let rates_ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && self.boost.is_none_or(|b| b.target > 0.0 && b.target.is_finite());
        if !rates_ok {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("L2 coefficient {} must be non-negative", self.l2)));
        }
        Ok(())
    }
}

/// Learning rate for a step taken during `epoch` (0-based) after
/// `update_count` earlier updates: the base rate, or the boost target once
/// `update_count >= after_updates`, divided by 10 for every decay epoch
/// `<= epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize, update_count: u64) -> f64 {
    let rate = match config.boost {
        Some(b) if update_count >= b.after_updates => b.target,
        _ => config.base_lr,
    };
    let decays = config.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    rate / 10f64.powi(decays as i32)
}

/// Nesterov momentum in velocity form, with `g` the gradient at the current
/// parameters:
///
/// ```text
/// v <- mu * v - lr * g
/// p <- p + mu * v - lr * g
/// ```
///
/// This equals the classical look-ahead formulation under the change of
/// variables `p = theta + mu * v`.
pub fn nesterov_step<T: Scalar>(params: &mut [Vec<T>], velocity: &mut [Vec<T>], grads: &[Vec<T>], lr: f64, momentum: f64) {
    assert_eq!(params.len(), velocity.len());
    assert_eq!(params.len(), grads.len());
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        assert_eq!(p.len(), g.len());
        assert_eq!(v.len(), g.len());
        for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v - lr * g;
            *p += mu * *v - lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svhn_schedule() {
        let c = TrainConfig::svhn_recipe();
        assert_eq!(lr_at(&c, 0, 0), 0.01);
        assert!((lr_at(&c, 25, 5000) - 0.001).abs() < 1e-15);
        assert!((lr_at(&c, 35, 9000) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn cifar_boost() {
        let c = TrainConfig::cifar_recipe();
        assert_eq!(lr_at(&c, 0, 399), 0.01);
        assert_eq!(lr_at(&c, 1, 401), 0.1);
        assert!((lr_at(&c, 60, 401) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn constant_without_decay() {
        let c = TrainConfig {
            decay_epochs: vec![],
            boost: None,
            ..TrainConfig::default()
        };
        assert!((0..50).all(|e| lr_at(&c, e, e as u64 * 100) == c.base_lr));
    }

    #[test]
    fn presets_validate() {
        for name in ["desk", "svhn", "cifar", "cifar-augmented"] {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("imagenet").is_err());
        let bad = TrainConfig {
            decay_epochs: vec![15, 10],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let late = TrainConfig {
            decay_epochs: vec![25],
            ..TrainConfig::default()
        };
        assert!(late.validate().is_err());
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let mut p = vec![vec![1.0f64, -2.0]];
        let mut v = vec![vec![0.0; 2]];
        nesterov_step(&mut p, &mut v, &[vec![0.5, 0.25]], 0.1, 0.0);
        assert_eq!(p[0], vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut p = vec![vec![0.0f64]];
        let mut v = vec![vec![1.0f64]];
        for k in 1..=5 {
            nesterov_step(&mut p, &mut v, &[vec![0.0]], 0.1, 0.9);
            assert!((v[0][0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_lookahead_oracle_on_quadratic() {
        // f(x) = 0.5 * a * (x - b)^2, optimized with the textbook look-ahead
        // form: v <- mu v - lr f'(theta + mu v); theta <- theta + v.
        let (a, b, lr, mu) = (3.0, 1.5, 0.01, 0.9);
        let grad = |x: f64| a * (x - b);
        let mut theta = -2.0f64;
        let mut v_ref = 0.0f64;
        let mut p = vec![vec![theta]];
        let mut v = vec![vec![0.0f64]];
        for _ in 0..10 {
            v_ref = mu * v_ref - lr * grad(theta + mu * v_ref);
            theta += v_ref;
            let g = grad(p[0][0]);
            nesterov_step(&mut p, &mut v, &[vec![g]], lr, mu);
            // The velocity-form iterate is the look-ahead point.
            assert!((p[0][0] - (theta + mu * v_ref)).abs() < 1e-12);
            assert!((v[0][0] - v_ref).abs() < 1e-12);
        }
    }
}
