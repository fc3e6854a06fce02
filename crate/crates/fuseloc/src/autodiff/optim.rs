//! Adam optimizer with classic L2 regularization and per-prefix learning
//! rates.
//!
//! Weight decay is folded into the gradient before the moment updates
//! (`g += wd * theta`), not applied decoupled. Learning-rate groups match
//! parameters by name prefix; the longest matching prefix wins.

use crate::autodiff::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Base hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Learning-rate override for parameters whose name starts with `prefix`.
#[derive(Debug, Clone)]
pub struct LrGroup {
    pub prefix: String,
    pub lr: f64,
}

/// Training-schedule hyperparameters: base learning rates for the main and
/// image-branch groups, classic L2 strength, and the step-drop schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr_main: f64,
    pub lr_image_branch: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// 1-based epoch from which every learning rate is divided by
    /// `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_main: 1e-3,
            lr_image_branch: 1e-4,
            weight_decay: 1e-3,
            epochs: 50,
            lr_drop_epoch: 30,
            lr_drop_factor: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_main", self.lr_main),
            ("lr_image_branch", self.lr_image_branch),
            ("lr_drop_factor", self.lr_drop_factor),
        ] {
            if !(v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.lr_drop_epoch == 0 {
            return Err(Error::validation("epochs and lr_drop_epoch must be positive"));
        }
        if self.lr_drop_epoch > self.epochs {
            return Err(Error::validation(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        Ok(())
    }

    /// Learning-rate multiplier in force at a 1-based epoch.
    pub fn lr_scale_for_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            1.0 / self.lr_drop_factor
        } else {
            1.0
        }
    }

    /// Adam over the parameter set with the image branch in its own
    /// learning-rate group.
    pub fn build<F: Scalar>(&self, params: &ParamSet<F>) -> Adam<F> {
        Adam::new(
            params,
            AdamConfig {
                lr: self.lr_main,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            vec![LrGroup { prefix: "img.".into(), lr: self.lr_image_branch }],
        )
    }
}

/// Adam state over a [`ParamSet`]. Moment buffers are allocated only for
/// trainable parameters; buffers (running statistics) are never touched.
pub struct Adam<F: Scalar> {
    cfg: AdamConfig,
    groups: Vec<LrGroup>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    lr_scale: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, cfg: AdamConfig, groups: Vec<LrGroup>) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| if p.trainable { vec![F::zero(); p.values.len()] } else { Vec::new() })
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { cfg, groups, m, v, t: 0, lr_scale: 1.0 }
    }

    /// Multiplier applied to every group's learning rate (schedule hook).
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Effective learning rate for a parameter name, before `lr_scale`.
    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .filter(|g| name.starts_with(&g.prefix))
            .max_by_key(|g| g.prefix.len())
            .map_or(self.cfg.lr, |g| g.lr)
    }

    /// One update over all trainable parameters, consuming their current
    /// gradients (which the caller zeroes between steps).
    pub fn step(&mut self, params: &mut ParamSet<F>) {
        self.t += 1;
        let t = self.t as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let eps = F::from_f64(self.cfg.eps);
        let wd = F::from_f64(self.cfg.weight_decay);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let lr = {
                let p = params.get(id);
                F::from_f64(self.lr_for(&p.name) * self.lr_scale)
            };
            let p = params.get_mut(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for i in 0..p.values.len() {
                let g = p.grad[i] + wd * p.values[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
