use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSet};

/// Adam with decoupled weight decay. Weight decay skips 1×n parameters
/// (biases, normalization gains).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params.values().iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with the learning rate scaled by `lr_scale`. Parameters
    /// with `None` gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Matrix>], lr_scale: f64) {
        self.step += 1;
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let decay = if p.rows > 1 { self.weight_decay } else { 0.0 };
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p.data[k]);
            }
        }
    }
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupLinear {
    pub warmup: u64,
    pub total: u64,
}

impl WarmupLinear {
    pub fn new(total: u64, warmup_frac: f64) -> Self {
        WarmupLinear {
            warmup: (total as f64 * warmup_frac).round() as u64,
            total: total.max(1),
        }
    }

    /// Multiplier for the learning rate at 1-based step `step`.
    pub fn factor(&self, step: u64) -> f64 {
        if self.warmup > 0 && step <= self.warmup {
            step as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            (self.total - step) as f64 / (self.total - self.warmup).max(1) as f64
        }
    }
}

/// Gradient clipping by global L2 norm; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Matrix::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.scale(s));
    }
    norm
}
