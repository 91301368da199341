use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::rng_from;
use crate::error::{config_err, Result};
use crate::network::{apply_layers, check_input, Bound, BnMode, ForwardRecord, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ radius.
    pub eps: f64,
    /// Step size; a quarter of the radius when absent.
    pub step: Option<f64>,
    pub steps: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eps: 8.0 / 255.0,
            step: None,
            steps: 20,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.step.unwrap_or(self.eps / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(config_err!("eps must be finite and ≥ 0, got {}", self.eps));
        }
        let s = self.step_size();
        if self.eps > 0.0 && !(s > 0.0 && s <= self.eps) {
            return Err(config_err!("step {s} outside (0, eps = {}]", self.eps));
        }
        if self.steps == 0 {
            return Err(config_err!("attack needs steps ≥ 1"));
        }
        Ok(())
    }
}

pub(crate) fn n_classes(spec: &NetworkSpec) -> Result<usize> {
    let out = spec.validate()?.pop().unwrap_or_default();
    match out.as_slice() {
        [k] if spec.has_head() && *k >= 2 => Ok(*k),
        _ => Err(config_err!("attack needs a classifier ending in N×K logits")),
    }
}

fn project(x: &mut Tensor, x0: &Tensor, eps: f64) {
    for (v, c) in x.data_mut().iter_mut().zip(x0.data()) {
        *v = v.clamp(c - eps, c + eps).clamp(0.0, 1.0);
    }
}

/// Cross-entropy of the eval-mode classifier and its gradient in `x`.
pub fn ce_and_grad(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params);
    let xv = g.param(x.clone());
    let mut rec = ForwardRecord::default();
    let logits = apply_layers(&mut g, spec, params, &bound, 0..spec.layers.len(), xv, BnMode::Eval, &mut rec)?;
    let ce = g.cross_entropy(logits, labels)?;
    g.backward(ce)?;
    let grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((g.value(ce).item(), grad))
}

/// Projected sign-gradient ascent on the classification loss inside the
/// L∞ ball of radius `eps` around `x`, starting from a uniform point in the
/// ball. Every iterate stays in the ball and in `[0, 1]`.
pub fn pgd_attack(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    n_classes(spec)?;
    check_input(x, &spec.input_shape)?;
    if cfg.eps == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng_from(cfg.seed);
    let mut adv = x.clone();
    adv.axpy(1.0, &Tensor::rand_uniform(x.shape(), -cfg.eps, cfg.eps, &mut rng));
    project(&mut adv, x, cfg.eps);
    let step = cfg.step_size();
    for _ in 0..cfg.steps {
        let (_, grad) = ce_and_grad(spec, params, &adv, labels)?;
        for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            // sign(0) = 0: flat pixels stay put.
            if *g > 0.0 {
                *v += step;
            } else if *g < 0.0 {
                *v -= step;
            }
        }
        project(&mut adv, x, cfg.eps);
    }
    Ok(adv)
}

/// Gaussian noise rescaled per item to an L∞ norm of exactly `eps`, added
/// to `x` and clamped to `[0, 1]`.
pub fn random_perturb(x: &Tensor, eps: f64, seed: u64) -> Result<Tensor> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(config_err!("eps must be finite and ≥ 0, got {eps}"));
    }
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng_from(seed);
    let mut noise = Tensor::randn(x.shape(), 1.0, &mut rng);
    let per = x.item_len().max(1);
    for chunk in noise.data_mut().chunks_mut(per) {
        let m = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            chunk.iter_mut().for_each(|v| *v *= eps / m);
        }
    }
    let mut out = x.clone();
    out.axpy(1.0, &noise);
    project(&mut out, x, eps);
    Ok(out)
}

/// Largest per-item L∞ distance between two batches.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_map(b, |p, q| p - q)?.abs_max())
}
