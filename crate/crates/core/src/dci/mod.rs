//! Block-wise inversion training: each inversion module is first fitted on
//! its own block with the earlier modules frozen, then all modules up to the
//! current depth are fine-tuned together. Every stage is guided by pixel,
//! layer and cycle-consistency losses through the frozen target.

mod losses;
mod model;
mod train;

pub use losses::{loss_cyc, loss_img, loss_layer, loss_total, LossBreakdown};
pub use model::{invert, InversionModel};
pub use train::{
    finetune_up_to_k, heldout_img_loss, run_dci, train_end_to_end_baseline, train_module_k, BaselineRun, DciRun,
    Phase, PhaseLog, StageLog,
};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config_err, Result};
use crate::optim::ScheduleConfig;

/// Weight of the cycle-consistency term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    /// Chosen at the start of each stage so the weighted cycle term equals
    /// the image term on the first batch, then held for the stage.
    Auto,
    Fixed(f64),
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Auto => s.serialize_str("auto"),
            Alpha::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Alpha::Fixed(v)),
            Raw::Int(v) => Ok(Alpha::Fixed(v as f64)),
            Raw::Word(w) if w == "auto" => Ok(Alpha::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("alpha must be a number or \"auto\", got {w:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DciConfig {
    pub alpha: Alpha,
    pub iters_per_module: usize,
    pub iters_finetune: usize,
    pub lr_module: f64,
    pub lr_finetune: f64,
    /// Floor of the cosine schedule as a fraction of its peak.
    pub lr_min_ratio: f64,
    pub restarts: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for DciConfig {
    fn default() -> Self {
        DciConfig {
            alpha: Alpha::Auto,
            iters_per_module: 1500,
            iters_finetune: 1500,
            lr_module: 1e-3,
            lr_finetune: 1e-4,
            lr_min_ratio: 0.0,
            restarts: 3,
            batch_size: 16,
            log_every: 50,
            seed: 0,
        }
    }
}

impl DciConfig {
    pub fn validate(&self) -> Result<()> {
        if let Alpha::Fixed(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(config_err!("alpha must be finite and ≥ 0, got {a}"));
            }
        }
        if self.iters_per_module == 0 || self.iters_finetune == 0 {
            return Err(config_err!("iteration counts must be ≥ 1"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch norm needs batches of at least 2"));
        }
        if self.log_every == 0 {
            return Err(config_err!("log_every must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return Err(config_err!("lr_min_ratio {} outside [0, 1]", self.lr_min_ratio));
        }
        self.module_schedule().validate()?;
        self.finetune_schedule().validate()
    }

    pub fn module_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr_module,
            lr_min: self.lr_module * self.lr_min_ratio,
            total_iters: self.iters_per_module,
            restarts: self.restarts,
        }
    }

    pub fn finetune_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr_finetune,
            lr_min: self.lr_finetune * self.lr_min_ratio,
            total_iters: self.iters_finetune,
            restarts: self.restarts,
        }
    }

    /// Iterations spent by a block-wise run up to depth `k`.
    pub fn budget(&self, k: usize) -> usize {
        k * self.iters_per_module + k.saturating_sub(1) * self.iters_finetune
    }
}
