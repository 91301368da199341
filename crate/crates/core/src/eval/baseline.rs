use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::rng_from;
use crate::error::{config_err, Error, Result};
use crate::network::{check_input, forward_blocks, Bound, BnMode, ForwardRecord, NetworkSpec, ParamStore};
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub tv_weight: f64,
    pub seed: u64,
}

impl Default for InputOptConfig {
    fn default() -> Self {
        InputOptConfig {
            steps: 2000,
            lr: 0.05,
            tv_weight: 1e-4,
            seed: 0,
        }
    }
}

impl InputOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and > 0, got {}", self.lr));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(config_err!("tv_weight must be finite and ≥ 0, got {}", self.tv_weight));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputOptResult {
    pub image: Tensor,
    pub best_loss: f64,
    /// Number of updates behind the returned iterate.
    pub best_step: usize,
}

fn objective(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, emb: &Tensor, k: usize, tv_weight: f64) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params);
    let xv = g.param(x.clone());
    let mut rec = ForwardRecord::default();
    let outs = forward_blocks(&mut g, spec, params, &bound, xv, 0..k, BnMode::Eval, &mut rec)?;
    let want = g.constant(emb.clone());
    let fit = g.l2_stat_loss(*outs.last().expect("k ≥ 1"), want)?;
    let tv = g.total_variation(xv)?;
    let wtv = g.scale(tv, tv_weight)?;
    let loss = g.add(fit, wtv)?;
    g.backward(loss)?;
    let grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((g.value(loss).item(), grad))
}

/// Inversion by direct optimization: pixels start uniform in `[0, 1]` and
/// follow Adam on the Euclidean distance between `F_{1:k}(x)` and `emb`
/// plus a smoothness penalty, clamped after every step. Returns the iterate
/// with the lowest objective.
pub fn input_opt_invert(spec: &NetworkSpec, params: &ParamStore, emb: &Tensor, k: usize, cfg: &InputOptConfig) -> Result<InputOptResult> {
    cfg.validate()?;
    if k == 0 || k > spec.num_blocks() {
        return Err(Error::Index(format!("depth {k} outside 1..={}", spec.num_blocks())));
    }
    check_input(emb, &spec.block_output_shape(k - 1)?)?;
    let mut shape = vec![emb.batch()];
    shape.extend_from_slice(&spec.input_shape);
    let mut x = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng_from(cfg.seed));
    let mut best: Option<(f64, usize, Tensor)> = None;
    let mut adam = AdamState::new();
    for step in 0..=cfg.steps {
        let (loss, grad) = objective(spec, params, &x, emb, k, cfg.tv_weight)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("input optimization step {step}: loss {loss}")));
        }
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, step, x.clone()));
        }
        if step == cfg.steps {
            break;
        }
        let mut p = BTreeMap::from([("x".to_string(), x)]);
        let grads = BTreeMap::from([("x".to_string(), grad)]);
        adam.step(&mut p, &grads, cfg.lr)
            .map_err(|e| Error::Diverged(format!("input optimization step {step}: {e}")))?;
        x = p.remove("x").expect("inserted above").clamp(0.0, 1.0);
    }
    let (best_loss, best_step, image) = best.expect("at least one evaluation");
    Ok(InputOptResult {
        image,
        best_loss,
        best_step,
    })
}
