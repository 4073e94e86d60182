use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    MeanSquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    /// Evaluate on the validation set every this many epochs (0: only after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 512,
            base_lr: 1e-3,
            warmup_steps: 1000,
            decay_every: 20_000,
            decay_factor: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::CrossEntropy,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Published optimizer settings: batch 512, 1k warmup steps to 1e-3, ×0.1 every 20k steps.
    pub fn paper() -> Self {
        Self::default()
    }

    /// 30 epochs of batch 256 with the schedule compressed to match.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            warmup_steps: 100,
            decay_every: 1000,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if self.warmup_steps == 0 || self.decay_every == 0 {
            return bad("warmup_steps and decay_every must be >= 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then step decay counted from the end of warmup.
/// Steps are 1-based.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let k = (step - cfg.warmup_steps) / cfg.decay_every;
        cfg.base_lr * cfg.decay_factor.powi(k.min(i32::MAX as usize) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_schedule_points() {
        let cfg = TrainConfig::paper();
        assert!((lr_at(500, &cfg) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(1000, &cfg), 1e-3);
        assert_eq!(lr_at(1001, &cfg), 1e-3);
        assert!((lr_at(21_000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(20_999, &cfg) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        TrainConfig::desk().validate().unwrap();
        for bad in [
            TrainConfig {
                warmup_steps: 0,
                ..TrainConfig::desk()
            },
            TrainConfig {
                decay_factor: 1.0,
                ..TrainConfig::desk()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::desk()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
