//! Optimizer, learning-rate schedule and the two fine-tuning stages.

mod run;

pub use run::{checkpoint_name, train_stage1, train_stage2, LogRow, TrainOutcome, CONFIG_FILE, FINAL_CKPT, LAST_GOOD_CKPT, LOG_FILE};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::objectives::UlMode;
use crate::synthdata::{ConflictConfig, Template};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    /// Passes over the training set (stage 1).
    pub epochs: usize,
    /// Optimizer steps (stage 2).
    pub steps: usize,
    pub alpha: f64,
    pub ul_mode: UlMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Stage-2 checkpoint cadence; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub template: Template,
    pub conflict: ConflictConfig,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            // Copying only emerges after ~30k samples; 3 epochs never get there.
            base_lr: 2e-3,
            warmup_ratio: 0.03,
            batch_size: 16,
            epochs: 20,
            steps: 0,
            alpha: 0.0,
            ul_mode: UlMode::Sequence,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 0,
            template: Template::PreIns,
            conflict: ConflictConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            base_lr: 2e-4,
            batch_size: 8,
            epochs: 0,
            steps: 100,
            alpha: 0.05,
            checkpoint_every: 10,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.stage == 1 && self.epochs == 0 {
            return bad("stage 1 needs at least one epoch".into());
        }
        if self.stage == 2 && self.steps == 0 {
            return bad("stage 2 needs at least one step".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("invalid Adam hyper-parameters".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip: self.grad_clip,
        }
    }
}

/// Linear warmup to `base_lr` over `round(warmup_ratio * total_steps)`
/// steps, then linear decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if warmup == total_steps {
        return Ok(base_lr);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Global-norm clipping followed by one bias-corrected Adam update.
/// Returns the pre-clip gradient norm.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid("parameter, gradient and state counts differ".into()));
    }
    let mut sq = 0.0f64;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
            });
        }
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        sq += g.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::cst(cfg.beta1), T::cst(cfg.beta2));
    let (one_b1, one_b2) = (T::cst(1.0 - cfg.beta1), T::cst(1.0 - cfg.beta2));
    let step_size = T::cst(lr / bc1);
    let inv_bc2 = T::cst(1.0 / bc2);
    let (eps, scale) = (T::cst(cfg.eps), T::cst(scale));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gr = gr * scale;
            *mi = b1 * *mi + one_b1 * gr;
            *vi = b2 * *vi + one_b2 * gr * gr;
            *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests;
