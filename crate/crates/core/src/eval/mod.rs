//! Reconstruction metrics, perturbation attacks, depth sweeps, generator
//! evaluations and a direct input-optimization baseline.

mod attack;
mod baseline;
mod gan;
mod metrics;

pub use attack::{ce_and_grad, linf_distance, pgd_attack, random_perturb, AttackConfig};
pub use baseline::{input_opt_invert, InputOptConfig, InputOptResult};
pub use gan::{
    encode, generate, interpolate_latents, latent_recover_eval, real_vs_generated_eval, reproject, LatentRecovery,
    RealVsGenerated, Reprojection,
};
pub use metrics::{
    cycle_distance, cycle_distance_per_image, l1_per_image, mean_std, psnr, psnr_per_image, sign_test,
    MetricsReport, SignTest, PERCEPTUAL_NOTE, PSNR_CAP,
};

use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::dci::InversionModel;
use crate::error::{config_err, shape_err, Error, Result};
use crate::network::{forward_sub, NetworkSpec, ParamStore};
use crate::par;
use crate::tensor::Tensor;

/// Items per parallel work unit. Fixed so results do not depend on the
/// worker count.
const CHUNK: usize = 16;

fn chunked(n: usize, f: impl Fn(usize, usize, usize) -> Result<Tensor> + Sync) -> Result<Tensor> {
    let parts = par::map_indexed(n.div_ceil(CHUNK), par::threads(), |c| f(c, c * CHUNK, (c * CHUNK + CHUNK).min(n)));
    Tensor::concat_batch(&parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Single-pass reconstruction of `x` from its depth-`k` embedding.
pub fn reconstruct_from_depth(target: &NetworkSpec, tparams: &ParamStore, inv: &InversionModel, x: &Tensor, k: usize) -> Result<Tensor> {
    inv.check_target(target)?;
    chunked(x.batch(), |_, a, b| {
        let emb = forward_sub(target, tparams, &x.slice_batch(a, b), 1, k)?;
        inv.invert(&emb, k)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSweepResult {
    pub rows: Vec<DepthRow>,
}

/// Mean PSNR and cycle distance of reconstructions of `x` from each
/// requested depth, each with its own inversion model.
pub fn depth_sweep(target: &NetworkSpec, tparams: &ParamStore, models: &[(usize, &InversionModel)], x: &Tensor) -> Result<DepthSweepResult> {
    if models.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(config_err!("depths must be strictly increasing"));
    }
    let mut rows = Vec::with_capacity(models.len());
    for &(k, inv) in models {
        if k == 0 || k > inv.trained_up_to {
            return Err(Error::Index(format!(
                "no inversion for depth {k}; model trained up to {}",
                inv.trained_up_to
            )));
        }
        let y = reconstruct_from_depth(target, tparams, inv, x, k)?;
        let report = MetricsReport::measure(format!("depth {k}"), 0, target, tparams, x, &y)?;
        rows.push(DepthRow { depth: k, report });
    }
    Ok(DepthSweepResult { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialGap {
    pub depth: usize,
    pub eps: f64,
    pub random: MetricsReport,
    pub adversarial: MetricsReport,
    /// Sign test of "random PSNR exceeds adversarial PSNR".
    pub sign_test: SignTest,
}

/// Inverts depth-`k` features of PGD-perturbed and of magnitude-matched
/// randomly perturbed copies of `x`. Both reconstructions are scored against
/// the clean `x`.
pub fn adversarial_gap(
    target: &NetworkSpec,
    tparams: &ParamStore,
    inv: &InversionModel,
    x: &Tensor,
    labels: &[usize],
    k: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialGap> {
    cfg.validate()?;
    if labels.len() != x.batch() {
        return Err(shape_err!("{} labels for {} images", labels.len(), x.batch()));
    }
    let adv = chunked(x.batch(), |c, a, b| {
        let sub = AttackConfig {
            seed: derive_seed(cfg.seed, "pgd", c as u64),
            ..cfg.clone()
        };
        pgd_attack(target, tparams, &x.slice_batch(a, b), &labels[a..b], &sub)
    })?;
    let rnd = random_perturb(x, cfg.eps, derive_seed(cfg.seed, "random-perturb", 0))?;
    for (name, p) in [("adversarial", &adv), ("random", &rnd)] {
        let d = linf_distance(p, x)?;
        if d > cfg.eps + 1e-12 {
            return Err(Error::Config(format!("{name} perturbation {d} exceeds eps {}", cfg.eps)));
        }
    }
    let rec_adv = reconstruct_from_depth(target, tparams, inv, &adv, k)?;
    let rec_rnd = reconstruct_from_depth(target, tparams, inv, &rnd, k)?;
    let adversarial = MetricsReport::measure("adversarial", cfg.seed, target, tparams, x, &rec_adv)?;
    let random = MetricsReport::measure("random", cfg.seed, target, tparams, x, &rec_rnd)?;
    let sign_test = sign_test(&random.psnr, &adversarial.psnr)?;
    Ok(AdversarialGap {
        depth: k,
        eps: cfg.eps,
        random,
        adversarial,
        sign_test,
    })
}

#[cfg(test)]
mod tests;
