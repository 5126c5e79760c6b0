use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Optimization settings. Defaults are the full-length schedule; desk runs shorten
/// `total_iterations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub start_lrate: f64,
    pub stop_lrate: f64,
    pub total_iterations: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Forecast steps in the multi-step loss.
    pub rollout: usize,
    /// Back-propagate forecast losses into the analysis; off truncates at the analysis.
    pub rollout_gradient: bool,
    pub batch_size: usize,
    pub seed: u64,
    /// Cosine floor.
    pub eta_min: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 500,
            start_lrate: 1e-8,
            stop_lrate: 2e-3,
            total_iterations: 6000,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            adam_eps: 1e-8,
            rollout: 4,
            rollout_gradient: true,
            batch_size: 1,
            seed: 1,
            eta_min: 0.0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// The shortened schedule the shipped desk runs use.
    pub fn desk() -> Self {
        Self { total_iterations: 2000, batch_size: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if self.warmup_steps >= self.total_iterations {
            bad.push(format!("warmup {} must be below total {}", self.warmup_steps, self.total_iterations));
        }
        if !(self.start_lrate > 0.0 && self.stop_lrate > 0.0) || !(self.eta_min >= 0.0) {
            bad.push("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            bad.push("weight decay must be >= 0 and eps > 0".into());
        }
        if self.batch_size == 0 {
            bad.push("batch size must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }
}

/// Linear warm-up from `start_lrate` through step `warmup_steps + 1`, where it reaches
/// `stop_lrate`, then cosine decay to `eta_min` at the last step.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step == 0 || step > cfg.total_iterations {
        return Err(TrainError::StepRange { step, total: cfg.total_iterations });
    }
    let w = cfg.warmup_steps;
    if step <= w + 1 {
        if w == 0 {
            return Ok(cfg.stop_lrate);
        }
        return Ok((step - 1) as f64 / w as f64 * (cfg.stop_lrate - cfg.start_lrate) + cfg.start_lrate);
    }
    let span = (cfg.total_iterations - (w + 1)) as f64;
    let progress = (step - (w + 1)) as f64 / span;
    Ok(cfg.eta_min + 0.5 * (cfg.stop_lrate - cfg.eta_min) * (1.0 + (PI * progress).cos()))
}
