//! Supervised and distillation training: losses, batch mixing, AdamW, EMA and
//! the training loop.

mod optim;
mod run;
mod state;

pub use optim::{clip_grad_norm, AdamMoments};
pub use run::{train_run, train_run_from, train_step, BatchItem, Distiller, LogRow, RunData, RunResult, StepReport, ValidationRow};
pub use state::TrainState;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AtomicSystem;
use crate::models::ModelOutput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then exponential decay to `decay_floor * lr`.
    #[default]
    LinearWarmupExponentialDecay,
    /// Multiply by `milestone_factor` at each milestone.
    MilestoneDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha_e: f64,
    pub alpha_f: f64,
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: Schedule,
    /// Warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    /// Final learning rate relative to the peak.
    pub decay_floor: f64,
    /// Milestones as fractions of all steps.
    pub milestones: Vec<f64>,
    pub milestone_factor: f64,
    pub weight_decay: f64,
    pub amsgrad: bool,
    pub ema_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Expected share of synthetic samples per batch.
    pub alpha_target: f64,
    /// Loss weight of synthetic relative to reference samples.
    pub r_s_dft: f64,
    /// When set, λ is chosen on the first batch so that λ·L_KD starts at this
    /// value.
    pub auto_lambda: Option<f64>,
    /// Reuse teacher outputs for repeated training systems.
    pub cache_teacher: bool,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// End this invocation after this many epochs in total; the schedule
    /// still spans `epochs`, so a saved state can be resumed later.
    pub stop_after_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_e: 1.0,
            alpha_f: 100.0,
            lr: 1e-3,
            schedule: Schedule::default(),
            warmup_fraction: 0.05,
            decay_floor: 0.01,
            milestones: vec![0.5, 0.75],
            milestone_factor: 0.45,
            weight_decay: 0.0,
            amsgrad: false,
            ema_decay: 0.999,
            clip_norm: Some(10.0),
            batch_size: 16,
            epochs: 10,
            seed: 0,
            alpha_target: 0.0,
            r_s_dft: 1.0,
            auto_lambda: None,
            cache_teacher: true,
            eval_every: 1,
            stop_after_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha_e >= 0.0 && self.alpha_f >= 0.0) {
            return bad(format!("loss weights must be non-negative, got {} and {}", self.alpha_e, self.alpha_f));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.alpha_target) {
            return bad(format!("alpha_target must lie in [0, 1], got {}", self.alpha_target));
        }
        if !(self.r_s_dft > 0.0 && self.r_s_dft.is_finite()) {
            return bad(format!("r_s_dft must be positive, got {}", self.r_s_dft));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(self.decay_floor > 0.0 && self.decay_floor <= 1.0) {
            return bad("warmup_fraction must lie in [0, 1] and decay_floor in (0, 1]".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.milestone_factor > 0.0) {
            return bad("weight_decay must be non-negative and milestone_factor positive".into());
        }
        if let Some(t) = self.auto_lambda {
            if !(t > 0.0) {
                return bad(format!("auto_lambda target must be positive, got {t}"));
            }
        }
        Ok(())
    }

    /// Learning rate of 0-based `step` out of `total` steps.
    pub fn learning_rate(&self, step: u64, total: u64) -> f64 {
        let total = total.max(1) as f64;
        let t = step as f64;
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::LinearWarmupExponentialDecay => {
                let warmup = (self.warmup_fraction * total).ceil();
                if t < warmup {
                    self.lr * (t + 1.0) / warmup
                } else {
                    let span = (total - warmup).max(1.0);
                    self.lr * self.decay_floor.powf((t - warmup) / span)
                }
            }
            Schedule::MilestoneDecay => {
                let passed = self.milestones.iter().filter(|&&m| t >= m * total).count();
                self.lr * self.milestone_factor.powi(passed as i32)
            }
        }
    }
}

/// Terms of the training loss of one system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Absolute energy error.
    pub energy: f64,
    /// Mean absolute force-component error.
    pub forces: f64,
    /// Distillation loss before weighting.
    pub kd: f64,
}

/// `alpha_e |dE| + alpha_f mean|dF| + lambda kd`.
pub fn composite_loss(pred: &ModelOutput, system: &AtomicSystem, kd_term: f64, cfg: &TrainConfig, lambda: f64) -> Result<LossBreakdown> {
    let (Some(e), Some(f)) = (system.energy, &system.forces) else {
        return Err(Error::MissingLabels("training system has no energy/force labels".into()));
    };
    if f.len() != pred.forces.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted forces for {} labels", pred.forces.len(), f.len())));
    }
    let energy = (pred.energy - e).abs();
    let sum: f64 = pred.forces.iter().zip(f).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).sum();
    let forces = if f.is_empty() { 0.0 } else { sum / (3 * f.len()) as f64 };
    Ok(LossBreakdown {
        total: cfg.alpha_e * energy + cfg.alpha_f * forces + lambda * kd_term,
        energy,
        forces,
        kd: kd_term,
    })
}

/// Per-sample loss weights `(w_s, w_dft)` for a batch with synthetic share
/// `alpha_batch` and synthetic-to-reference ratio `r`. They satisfy
/// `w_s alpha + w_dft (1 - alpha) = 1` and `w_s = r w_dft`.
pub fn origin_weights(alpha_batch: f64, r: f64) -> Result<(f64, f64)> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("weight ratio must be positive, got {r}")));
    }
    if !(0.0..=1.0).contains(&alpha_batch) {
        return Err(Error::InvalidArgument(format!("batch share must lie in [0, 1], got {alpha_batch}")));
    }
    let denom = 1.0 - alpha_batch + alpha_batch * r;
    Ok((r / denom, 1.0 / denom))
}

/// Pool and index of one batch sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixedSample {
    pub synthetic: bool,
    pub index: usize,
}

/// Draws `batch_size` samples, each synthetic with probability
/// `alpha_target`, uniformly within its pool.
pub fn mix_batch<R: Rng + ?Sized>(
    dft_pool: &[AtomicSystem],
    synth_pool: &[AtomicSystem],
    batch_size: usize,
    alpha_target: f64,
    rng: &mut R,
) -> Result<Vec<MixedSample>> {
    if !(0.0..=1.0).contains(&alpha_target) {
        return Err(Error::InvalidArgument(format!("alpha_target must lie in [0, 1], got {alpha_target}")));
    }
    if alpha_target > 0.0 && synth_pool.is_empty() {
        return Err(Error::InvalidArgument("synthetic share requested but the synthetic pool is empty".into()));
    }
    if alpha_target < 1.0 && dft_pool.is_empty() {
        return Err(Error::InvalidArgument("reference pool is empty".into()));
    }
    Ok((0..batch_size)
        .map(|_| {
            let synthetic = rng.gen_bool(alpha_target);
            let n = if synthetic { synth_pool.len() } else { dft_pool.len() };
            MixedSample { synthetic, index: rng.gen_range(0..n) }
        })
        .collect())
}

#[cfg(test)]
mod tests;
