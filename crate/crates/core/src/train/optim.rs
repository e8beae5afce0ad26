//! SGD with momentum, coupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which gradients are rescaled.
    pub clip_threshold: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
    /// First epoch (zero-based) trained at the reduced rate.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Settings used for the 512-wide models on full-size data.
    pub fn paper() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_threshold: 0.1,
            dropout_rate: 0.5,
            epochs: 60,
            lr_drop_epoch: 30,
            lr_drop_factor: 10.0,
            batch_size: 128,
            seed: 0,
        }
    }

    /// Desk-scale schedule for the synthetic tasks.
    pub fn toy() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_threshold: 1.0,
            dropout_rate: 0.5,
            epochs: 30,
            lr_drop_epoch: 15,
            lr_drop_factor: 10.0,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("dropout_rate", self.dropout_rate),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DanError::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.dropout_rate >= 1.0 {
            return Err(DanError::Config("dropout_rate must be below 1".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(DanError::Config("clip_threshold must be positive".into()));
        }
        if !(self.lr_drop_factor > 0.0) || !self.lr_drop_factor.is_finite() {
            return Err(DanError::Config("lr_drop_factor must be positive".into()));
        }
        if self.lr_drop_epoch > self.epochs {
            return Err(DanError::Config(format!(
                "lr_drop_epoch {} exceeds epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(DanError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `threshold / g` when their global L2 norm `g`
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// `velocity = momentum·velocity + grad + weight_decay·param`, then
/// `param -= lr·velocity`, for every parameter of the store.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for name in params.names() {
        let g = grads
            .get(name)
            .ok_or_else(|| DanError::MissingGradient(name.to_string()))?;
        let p = params.get(name).expect("name from the store");
        if g.shape() != p.shape() {
            return Err(DanError::Shape {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    for (name, p, v) in params.iter_with_momentum_mut() {
        let g = grads[name].data();
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}
