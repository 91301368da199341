//! Adam with bias correction and a cosine learning-rate schedule with warm
//! restarts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Per-parameter Adam moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `grads`.
    ///
    /// Gradients are checked for finiteness before anything is modified, so
    /// a failing step leaves both `params` and the state untouched.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(config_err!("learning rate {lr}"));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name}[{i}] = {} at step {}",
                    g.data()[i],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let (pd, gd) = (p.data_mut(), g.data());
            let md = mo.m.data_mut();
            for i in 0..gd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
            }
            let vd = mo.v.data_mut();
            for i in 0..gd.len() {
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
            }
            let (md, vd) = (mo.m.data(), mo.v.data());
            for i in 0..gd.len() {
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors (`{param}.adam_m`, `{param}.adam_v`).
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, mo) in &self.moments {
            out.insert(format!("{name}.adam_m"), mo.m.clone());
            out.insert(format!("{name}.adam_v"), mo.v.clone());
        }
        out
    }

    pub fn from_named(t: u64, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut state = AdamState::new();
        state.t = t;
        for (key, m) in named {
            let Some(name) = key.strip_suffix(".adam_m") else {
                continue;
            };
            let v = named
                .get(&format!("{name}.adam_v"))
                .ok_or_else(|| Error::Config(format!("second moment of {name} missing")))?;
            if v.shape() != m.shape() || v.data().iter().any(|&x| x < 0.0) {
                return Err(config_err!("invalid second moment for {name}"));
            }
            state.moments.insert(
                name.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        Ok(state)
    }
}

/// Cosine annealing from `lr_max` to `lr_min`, restarted `restarts` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_iters: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    3
}

impl ScheduleConfig {
    pub fn new(lr_max: f64, lr_min: f64, total_iters: usize) -> Self {
        ScheduleConfig {
            lr_max,
            lr_min,
            total_iters,
            restarts: default_restarts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min.is_finite() && self.lr_max.is_finite()) || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(config_err!(
                "schedule needs 0 ≤ lr_min ≤ lr_max, got {} and {}",
                self.lr_min,
                self.lr_max
            ));
        }
        if self.total_iters == 0 {
            return Err(config_err!("schedule with zero iterations"));
        }
        Ok(())
    }

    /// Number of cosine periods; one per restart plus the initial one,
    /// capped so every period holds at least one iteration.
    pub fn periods(&self) -> usize {
        (self.restarts + 1).min(self.total_iters)
    }

    /// First iteration of period `j`.
    pub fn period_start(&self, j: usize) -> usize {
        j * self.total_iters / self.periods()
    }
}

/// Learning rate at iteration `iter`.
pub fn lr_at(cfg: &ScheduleConfig, iter: usize) -> Result<f64> {
    cfg.validate()?;
    if iter >= cfg.total_iters {
        return Err(Error::Index(format!(
            "iteration {iter} outside schedule of {}",
            cfg.total_iters
        )));
    }
    let periods = cfg.periods();
    let j = ((iter + 1) * periods - 1) / cfg.total_iters;
    // integer division may land one period early or late near boundaries
    let j = (j.saturating_sub(1)..=j.min(periods - 1))
        .rev()
        .find(|&j| cfg.period_start(j) <= iter)
        .unwrap_or(0);
    let start = cfg.period_start(j);
    let len = cfg.period_start(j + 1) - start;
    let pos = (iter - start) as f64 / len as f64;
    // written from the top so the restart value is exactly lr_max
    Ok(cfg.lr_max - 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 - (PI * pos).cos()))
}
