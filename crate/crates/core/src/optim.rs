//! AdamW with a linear-warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSpec {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Parameters whose name contains any of these are not decayed.
    pub decay_exempt: Vec<String>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            peak_lr: 5e-4,
            final_lr: 1e-6,
            warmup_epochs: 3,
            epochs: 30,
            weight_decay: 0.04,
            batch_size: 64,
            betas: (0.9, 0.999),
            eps: 1e-8,
            decay_exempt: vec!["bias".into(), "norm".into()],
            grad_clip: None,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.peak_lr > self.final_lr && self.final_lr > 0.0) {
            return Err(Error::Config(format!(
                "need peak_lr > final_lr > 0, got {} and {}",
                self.peak_lr, self.final_lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and eps > 0".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn is_exempt(&self, name: &str) -> bool {
        self.decay_exempt.iter().any(|p| name.contains(p.as_str()))
    }
}

/// Learning rate at optimizer step `step` (0-based).
///
/// Linear ramp from 0 to `peak_lr` over the warmup steps, then a cosine
/// decay that reaches `final_lr` on the last step.
pub fn lr_at(step: usize, steps_per_epoch: usize, spec: &OptimSpec) -> f64 {
    let warmup = spec.warmup_epochs * steps_per_epoch;
    let last = (spec.epochs * steps_per_epoch).saturating_sub(1);
    if step < warmup {
        return spec.peak_lr * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return spec.final_lr;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    spec.final_lr + 0.5 * (spec.peak_lr - spec.final_lr) * (1.0 + (PI * progress).cos())
}

pub struct AdamW {
    spec: OptimSpec,
    decay: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(names: &[String], params: &[Tensor], spec: &OptimSpec) -> Self {
        AdamW {
            spec: spec.clone(),
            decay: names.iter().map(|n| !spec.is_exempt(n)).collect(),
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "parameter {i}: buffer size {} vs param {} / grad {}",
                    self.m[i].len(),
                    p.numel(),
                    g.len()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = self.spec.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.spec.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = self.decay[i] && wd > 0.0;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                if decay {
                    *w -= lr * wd * *w;
                }
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.spec.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
