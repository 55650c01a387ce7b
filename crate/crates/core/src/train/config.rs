use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup followed by cosine decay to zero at the last step.
    Cosine { warmup_epochs: usize },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { warmup_epochs: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay, applied as `p -= lr·wd·p`.
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            optimizer: Optimizer::default(),
            lr_schedule: LrSchedule::default(),
            seed: 42,
            grad_clip_norm: Some(1.0),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.seed > crate::MAX_SEED {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, crate::MAX_SEED)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip_norm must be positive");
            }
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                let open = |b: f64| b > 0.0 && b < 1.0;
                if !open(beta1) || !open(beta2) {
                    return bad("Adam betas must lie in (0, 1)");
                }
                if !(eps > 0.0) {
                    return bad("Adam eps must be positive");
                }
            }
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad("SGD momentum must lie in [0, 1)");
                }
            }
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { warmup_epochs } => {
                let warmup = (warmup_epochs * steps_per_epoch).min(total);
                if step < warmup {
                    return self.learning_rate * (step + 1) as f64 / warmup as f64;
                }
                let span = (total - warmup).max(1) as f64;
                let progress = (step - warmup) as f64 / span;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
