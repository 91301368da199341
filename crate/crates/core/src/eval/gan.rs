use serde::{Deserialize, Serialize};

use super::metrics::{l1_per_image, mean_std, sign_test, SignTest};
use crate::dci::InversionModel;
use crate::error::{config_err, shape_err, Result};
use crate::network::{forward_logits, BnMode, NetworkSpec, ParamStore};
use crate::tensor::Tensor;
use crate::zoo::sample_latent;

/// Eval-mode generator output.
pub fn generate(gen: &NetworkSpec, gparams: &ParamStore, z: &Tensor) -> Result<Tensor> {
    forward_logits(gen, gparams, z, BnMode::Eval)
}

/// Latent estimate of generated-space images, through every inversion module.
pub fn encode(gen: &NetworkSpec, inv: &InversionModel, x: &Tensor) -> Result<Tensor> {
    inv.check_target(gen)?;
    inv.invert(x, inv.num_blocks())
}

fn latent_dim(gen: &NetworkSpec) -> Result<usize> {
    match gen.input_shape.as_slice() {
        [d] => Ok(*d),
        other => Err(config_err!("generator input must be a flat latent, got {other:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecovery {
    pub n: usize,
    pub seed: u64,
    /// Mean per-pixel `|G(ẑ) − G(z)|` for each sample.
    pub pixel_l1: Vec<f64>,
    pub pixel_l1_mean: f64,
    /// Mean per-coordinate `|ẑ − z|`.
    pub latent_l1_mean: f64,
}

pub fn latent_recover_eval(gen: &NetworkSpec, gparams: &ParamStore, inv: &InversionModel, n: usize, seed: u64) -> Result<LatentRecovery> {
    let d = latent_dim(gen)?;
    let z = sample_latent(d, n, seed);
    let x = generate(gen, gparams, &z)?;
    let zh = encode(gen, inv, &x)?;
    let xh = generate(gen, gparams, &zh)?;
    let pixel_l1 = l1_per_image(&x, &xh)?;
    let latent = l1_per_image(&z, &zh)?;
    Ok(LatentRecovery {
        n,
        seed,
        pixel_l1_mean: mean_std(&pixel_l1).0,
        pixel_l1,
        latent_l1_mean: mean_std(&latent).0,
    })
}

/// Generator outputs along the straight line between the latent estimates
/// of `x1` and `x2`, on `steps` evenly spaced points including both ends.
/// Each frame is generated on its own so the end frames equal
/// `G(G⁻¹(x1))` and `G(G⁻¹(x2))` exactly.
pub fn interpolate_latents(
    gen: &NetworkSpec,
    gparams: &ParamStore,
    inv: &InversionModel,
    x1: &Tensor,
    x2: &Tensor,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(config_err!("interpolation needs at least 2 steps"));
    }
    if x1.shape() != x2.shape() {
        return Err(shape_err!("interpolation ends {:?} and {:?}", x1.shape(), x2.shape()));
    }
    let z1 = encode(gen, inv, x1)?;
    let z2 = encode(gen, inv, x2)?;
    let mut frames = Vec::with_capacity(steps);
    for i in 0..steps {
        let z = if i == 0 {
            z1.clone()
        } else if i == steps - 1 {
            z2.clone()
        } else {
            let t = i as f64 / (steps - 1) as f64;
            z1.zip_map(&z2, |a, b| (1.0 - t) * a + t * b)?
        };
        frames.push(generate(gen, gparams, &z)?);
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reprojection {
    pub images: Tensor,
    pub recovered: Tensor,
    pub latent_norm_mean: f64,
    pub recovered_norm_mean: f64,
}

fn row_norms(z: &Tensor) -> Vec<f64> {
    z.data().chunks(z.item_len().max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// `G(G⁻¹(G(z)))` with the Euclidean norms of `z` and of its estimate.
pub fn reproject(gen: &NetworkSpec, gparams: &ParamStore, inv: &InversionModel, z: &Tensor) -> Result<Reprojection> {
    let x = generate(gen, gparams, z)?;
    let zh = encode(gen, inv, &x)?;
    let images = generate(gen, gparams, &zh)?;
    Ok(Reprojection {
        images,
        latent_norm_mean: mean_std(&row_norms(z)).0,
        recovered_norm_mean: mean_std(&row_norms(&zh)).0,
        recovered: zh,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealVsGenerated {
    pub n: usize,
    pub seed: u64,
    pub generated: Vec<f64>,
    pub real: Vec<f64>,
    pub generated_mean: f64,
    pub real_mean: f64,
    /// Sign test of "real error exceeds generated error".
    pub sign_test: SignTest,
}

/// Per-image L1 between inputs and their reprojection `G(G⁻¹(x))`, for `n`
/// generated images and the first `n` real images, through one pipeline.
pub fn real_vs_generated_eval(
    gen: &NetworkSpec,
    gparams: &ParamStore,
    inv: &InversionModel,
    real: &Tensor,
    n: usize,
    seed: u64,
) -> Result<RealVsGenerated> {
    if real.batch() < n || n == 0 {
        return Err(config_err!("need 1 ≤ n ≤ {} real images, got n = {n}", real.batch()));
    }
    let d = latent_dim(gen)?;
    let fake = generate(gen, gparams, &sample_latent(d, n, seed))?;
    let real = real.slice_batch(0, n);
    let err = |x: &Tensor| -> Result<Vec<f64>> {
        let back = generate(gen, gparams, &encode(gen, inv, x)?)?;
        l1_per_image(x, &back)
    };
    let generated = err(&fake)?;
    let real = err(&real)?;
    if generated.len() != real.len() {
        return Err(shape_err!("unequal group sizes {} and {}", generated.len(), real.len()));
    }
    Ok(RealVsGenerated {
        n,
        seed,
        generated_mean: mean_std(&generated).0,
        real_mean: mean_std(&real).0,
        sign_test: sign_test(&real, &generated)?,
        generated,
        real,
    })
}
