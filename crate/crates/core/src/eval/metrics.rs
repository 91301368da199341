use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{shape_err, Error, Result};
use crate::network::{forward_full, BnMode, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

/// Recorded in every report: the perceptual metric is a feature distance
/// through the target itself, not a learned perceptual network.
pub const PERCEPTUAL_NOTE: &str = "cycle_distance (target-feature L1) stands in for LPIPS";

fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / mse).log10()).clamp(0.0, PSNR_CAP)
}

/// `10·log10(max²/MSE)` over the whole tensor, clamped to `[0, 99]` dB.
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err!("psnr of {:?} and {:?}", x.shape(), y.shape()));
    }
    let se: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(psnr_from_mse(se / x.len() as f64, max_val))
}

/// PSNR of every batch item.
pub fn psnr_per_image(x: &Tensor, y: &Tensor, max_val: f64) -> Result<Vec<f64>> {
    if x.shape() != y.shape() {
        return Err(shape_err!("psnr of {:?} and {:?}", x.shape(), y.shape()));
    }
    let per = x.item_len();
    Ok(x.data()
        .chunks(per)
        .zip(y.data().chunks(per))
        .map(|(a, b)| {
            let se: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            psnr_from_mse(se / per as f64, max_val)
        })
        .collect())
}

/// Mean absolute difference per batch item.
pub fn l1_per_image(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != y.shape() {
        return Err(shape_err!("l1 of {:?} and {:?}", x.shape(), y.shape()));
    }
    let per = x.item_len();
    Ok(x.data()
        .chunks(per)
        .zip(y.data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / per as f64)
        .collect())
}

fn cycle_parts(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, y: &Tensor) -> Result<Vec<(f64, f64)>> {
    if x.shape() != y.shape() {
        return Err(shape_err!("cycle distance of {:?} and {:?}", x.shape(), y.shape()));
    }
    let a = forward_full(spec, params, x, BnMode::Eval)?;
    let b = forward_full(spec, params, y, BnMode::Eval)?;
    let n = x.batch();
    let mut out = vec![(0.0, 0.0); n];
    for l in 1..a.states.len() {
        let (fa, fb) = (a.at(l), b.at(l));
        let per = fa.item_len();
        for (i, o) in out.iter_mut().enumerate() {
            let ra = &fa.data()[i * per..(i + 1) * per];
            let rb = &fb.data()[i * per..(i + 1) * per];
            o.0 += ra.iter().zip(rb).map(|(p, q)| (p - q).abs()).sum::<f64>() / per as f64;
            o.1 += ra.iter().map(|p| p.abs()).sum::<f64>() / per as f64;
        }
    }
    Ok(out)
}

/// Cycle loss between `x` and `y` divided by the summed mean magnitude of
/// the trace of `x`.
pub fn cycle_distance(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, y: &Tensor) -> Result<f64> {
    let parts = cycle_parts(spec, params, x, y)?;
    let n = parts.len() as f64;
    let num: f64 = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let den: f64 = parts.iter().map(|p| p.1).sum::<f64>() / n;
    if den == 0.0 {
        return Err(Error::Config("cycle distance undefined: all-zero feature trace".into()));
    }
    Ok(num / den)
}

/// [`cycle_distance`] of every batch item.
pub fn cycle_distance_per_image(spec: &NetworkSpec, params: &ParamStore, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    cycle_parts(spec, params, x, y)?
        .into_iter()
        .enumerate()
        .map(|(i, (num, den))| {
            if den == 0.0 {
                Err(Error::Config(format!("cycle distance undefined for item {i}: all-zero feature trace")))
            } else {
                Ok(num / den)
            }
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub note: String,
    pub label: String,
    pub seed: u64,
    pub psnr: Vec<f64>,
    pub cycle: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub cycle_mean: f64,
    pub cycle_std: f64,
}

impl MetricsReport {
    pub fn new(label: impl Into<String>, seed: u64, psnr: Vec<f64>, cycle: Vec<f64>) -> Self {
        let (psnr_mean, psnr_std) = mean_std(&psnr);
        let (cycle_mean, cycle_std) = mean_std(&cycle);
        MetricsReport {
            note: PERCEPTUAL_NOTE.into(),
            label: label.into(),
            seed,
            psnr,
            cycle,
            psnr_mean,
            psnr_std,
            cycle_mean,
            cycle_std,
        }
    }

    /// PSNR and cycle distance of reconstructions `y` against references `x`.
    pub fn measure(label: impl Into<String>, seed: u64, spec: &NetworkSpec, params: &ParamStore, x: &Tensor, y: &Tensor) -> Result<Self> {
        let p = psnr_per_image(x, y, 1.0)?;
        let c = cycle_distance_per_image(spec, params, x, y)?;
        Ok(Self::new(label, seed, p, c))
    }
}

/// One-sided paired sign test of "first exceeds second".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub p_value: f64,
}

pub fn sign_test(first: &[f64], second: &[f64]) -> Result<SignTest> {
    if first.len() != second.len() {
        return Err(shape_err!("sign test over {} and {} values", first.len(), second.len()));
    }
    let (mut wins, mut losses, mut ties) = (0u64, 0u64, 0u64);
    for (a, b) in first.iter().zip(second) {
        if a > b {
            wins += 1;
        } else if a < b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 || wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).map_err(|e| Error::Config(e.to_string()))?;
        bin.sf(wins - 1)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}
