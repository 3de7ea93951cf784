//! Training: configuration, learning-rate schedule, optimizer, the step
//! loop, metrics logging and checkpoints.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
mod trainer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::BatchSpec;
use crate::error::{Error, Result};
use crate::mechanism::Mechanism;
use crate::model::ModelConfig;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointConfig, CheckpointMeta,
};
pub use metrics::{read_metrics, MetricsLog, MetricsRow, METRICS_HEADER};
pub use optim::{adamw_update, AdamHyper, AdamState};
pub use trainer::{train_step, TrainState, Trainer};

fn default_min_lr_ratio() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_mechanism() -> Mechanism {
    Mechanism::Vanilla
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub total_steps: u64,
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: Option<f64>,
    pub batch: BatchSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(peak_lr: f64, total_steps: u64, batch: BatchSpec) -> Self {
        Self {
            peak_lr,
            warmup_steps: 0,
            total_steps,
            min_lr_ratio: default_min_lr_ratio(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            weight_decay: default_weight_decay(),
            grad_clip_norm: default_clip(),
            batch,
            seed: 0,
            mechanism: Mechanism::Vanilla,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!(
                "min_lr_ratio must lie in [0, 1], got {}",
                self.min_lr_ratio
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_epsilon must be positive and weight_decay non-negative".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        self.batch.validate()
    }

    /// Checks that need the model as well.
    pub fn validate_with(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        model.validate()?;
        self.mechanism.validate(model.vocab_size)?;
        let need = self.mechanism.required_context(self.batch.context_len);
        if need > model.context_len {
            return Err(Error::Config(format!(
                "{} over windows of {} tokens needs context {need}, model has {}",
                self.mechanism.label(),
                self.batch.context_len,
                model.context_len
            )));
        }
        Ok(())
    }

    pub fn hyper(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr_ratio · peak_lr`
/// at `total_steps`. Steps past the end stay at the floor.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let floor = cfg.min_lr_ratio * peak;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return peak;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: u64, total: u64) -> TrainConfig {
        let mut c = TrainConfig::new(
            1e-3,
            total,
            BatchSpec {
                batch_size_tokens: 8,
                context_len: 4,
                seed: 0,
            },
        );
        c.warmup_steps = warmup;
        c
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(100, 1100);
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(50, &c) - 0.5e-3).abs() < 1e-15);
        assert_eq!(lr_at(100, &c), 1e-3);
        assert_eq!(lr_at(1100, &c), 0.1 * 1e-3);
        let mid = lr_at(600, &c);
        assert!((mid - 1e-3 * (0.1 + 0.9 * 0.5)).abs() < 1e-15);
        // continuity at the warmup boundary
        assert!((lr_at(99, &c) - lr_at(100, &c)).abs() < 2e-5);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let c = cfg(0, 10);
        assert_eq!(lr_at(0, &c), 1e-3);
        assert!((lr_at(10, &c) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        assert!(cfg(5, 10).validate().is_ok());
        assert!(cfg(11, 10).validate().is_err());
        let mut c = cfg(0, 10);
        c.peak_lr = 0.0;
        assert!(c.validate().is_err());
        let json = r#"{"peak_lr": 0.001, "total_steps": 5, "batch": {"batch_size_tokens": 8, "context_len": 4}, "warmpu_steps": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn pause_needs_room_in_context() {
        let mut c = cfg(0, 10);
        c.mechanism = Mechanism::Baseline(crate::baselines::BaselineKind::Pause { n_pauses: 1 });
        let small = ModelConfig::new(16, 16, 1, 2, 4);
        assert!(c.validate_with(&small).is_err());
        let big = ModelConfig::new(16, 16, 1, 2, 8);
        assert!(c.validate_with(&big).is_ok());
    }
}
