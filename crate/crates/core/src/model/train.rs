//! AdamW with a warmup-then-cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Gradients, Model, ModelError};
use crate::sampler::PackedWindow;

/// Linear warmup to `peak_lr`, then cosine decay to `final_lr` at
/// `total_steps`, constant afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            final_lr: 3e-4,
            warmup_steps: 20,
            total_steps: 400,
        }
    }
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak_lr: lr,
            final_lr: lr,
            warmup_steps: 0,
            total_steps: 1,
        }
    }
}

/// Learning rate for zero-based `step`.
pub fn lr_at(s: &Schedule, step: usize) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * (step + 1) as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps).max(1);
    let progress = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.final_lr + (s.peak_lr - s.final_lr) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &Model, config: TrainConfig) -> Self {
        let n = model.num_params();
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Restores a state saved from `moments`.
    pub fn from_parts(config: TrainConfig, step: usize, m: Vec<f64>, v: Vec<f64>) -> Result<Self, ModelError> {
        if m.len() != v.len() {
            return Err(ModelError::ParamCount {
                expected: m.len(),
                got: v.len(),
            });
        }
        Ok(Self { config, step, m, v })
    }

    /// First and second moment estimates.
    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One AdamW update from an accumulated gradient. A non-finite gradient
    /// leaves both the model and the optimizer state untouched.
    pub fn apply(&mut self, model: &mut Model, mut grad: Gradients) -> Result<f64, ModelError> {
        if grad.0.len() != model.num_params() || self.m.len() != grad.0.len() {
            return Err(ModelError::ParamCount {
                expected: model.num_params(),
                got: grad.0.len(),
            });
        }
        let norm = libm::sqrt(grad.0.iter().map(|g| g * g).sum::<f64>());
        if !norm.is_finite() {
            return Err(ModelError::DivergedTraining);
        }
        let c = &self.config;
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            let s = c.clip_norm / norm;
            grad.0.iter_mut().for_each(|g| *g *= s);
        }
        let lr = lr_at(&c.schedule, self.step);
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(&grad.0)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = (*m / bc1) / (libm::sqrt(*v / bc2) + c.eps);
            *p -= lr * (update + c.weight_decay * *p);
        }
        self.step += 1;
        Ok(lr)
    }

    /// Sum of each instance's mean target loss, and its gradient.
    pub fn batch_grad(model: &Model, batch: &[(&[u32], (usize, usize))]) -> Result<(f64, Gradients), ModelError> {
        let mut g = model.zero_grad();
        let mut loss = 0.0;
        for (tokens, span) in batch {
            loss += model.accumulate_grad(tokens, *span, 1.0, &mut g)?;
        }
        Ok((loss, g))
    }

    /// One optimizer step on a batch; returns the summed loss.
    pub fn train_step(&mut self, model: &mut Model, batch: &[(&[u32], (usize, usize))]) -> Result<f64, ModelError> {
        let (loss, g) = Self::batch_grad(model, batch)?;
        self.apply(model, g)?;
        Ok(loss)
    }

    /// One optimizer step on a packed window. Each packed instance is run
    /// on its own with positions starting at zero, so instances never
    /// attend to each other.
    pub fn train_window(&mut self, model: &mut Model, window: &PackedWindow) -> Result<f64, ModelError> {
        let batch = window_batch(window);
        self.train_step(model, &batch)
    }
}

/// The instances of a packed window as `(tokens, target span)` pairs, with
/// spans relative to each instance.
pub fn window_batch(window: &PackedWindow) -> Vec<(&[u32], (usize, usize))> {
    window
        .spans
        .iter()
        .enumerate()
        .map(|(i, s)| (window.instance_tokens(i), (s.target.0 - s.offset, s.target.1 - s.offset)))
        .collect()
}
