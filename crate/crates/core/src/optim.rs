//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut [&mut Tensor<S>], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter().map(|v| v.to_f64_lossy().powi(2)))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = S::c(max_norm / norm);
        params.iter_mut().for_each(|p| p.scale_grad(f));
    }
    norm
}

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and clears their gradients.
    ///
    /// The parameter list must be the same (same order and shapes) on every
    /// call. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGradient(format!("#{i}")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::InvalidShape {
                op: "adamw",
                shape: vec![params.len()],
                reason: format!("optimizer tracks {} parameters", self.m.len()),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    lhs: vec![self.m[i].len()],
                    rhs: p.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::c(1.0 - c.beta1.powi(t));
        let bc2 = S::c(1.0 - c.beta2.powi(t));
        let (lr, b1, b2, eps) = (S::c(c.lr), S::c(c.beta1), S::c(c.beta2), S::c(c.eps));
        let decay = S::c(c.lr * c.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked above").to_vec();
            let vals = p.values_mut();
            for k in 0..vals.len() {
                vals[k] -= decay * vals[k];
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                vals[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
