//! Procedural shapes dataset: rectangles, disks and crosses on a black canvas.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, rng_from, ImageSet, Origin};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["rectangle", "disk", "cross"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub size: usize,
    pub channels: usize,
    pub per_class: usize,
    /// Fraction of images held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Foreground intensity range.
    pub intensity: [f64; 2],
    /// Half-extent range in pixels.
    pub extent: [usize; 2],
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            size: 32,
            channels: 1,
            per_class: 200,
            val_fraction: 0.2,
            seed: 0,
            intensity: [0.5, 1.0],
            extent: [4, 10],
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(config_err!("shapes need 1 or 3 channels, got {}", self.channels));
        }
        let [lo, hi] = self.intensity;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(config_err!("intensity range {lo}..{hi} outside (0, 1]"));
        }
        let [emin, emax] = self.extent;
        if emin < 1 || emin > emax || 2 * emax + 1 > self.size {
            return Err(config_err!(
                "extent range {emin}..{emax} does not fit a {0}×{0} canvas",
                self.size
            ));
        }
        if self.per_class == 0 {
            return Err(config_err!("per_class must be positive"));
        }
        if self.n_val() == 0 || self.n_val() >= self.total() {
            return Err(config_err!(
                "val_fraction {} leaves no train or no validation images",
                self.val_fraction
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        N_CLASSES * self.per_class
    }

    pub fn n_val(&self) -> usize {
        (self.total() as f64 * self.val_fraction).round() as usize
    }
}

/// Geometry of one drawn shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    pub class: usize,
    pub cy: usize,
    pub cx: usize,
    /// Half-extents; the disk uses `a` as radius, the cross uses `a` as arm
    /// length and `b` as half-thickness.
    pub a: usize,
    pub b: usize,
    pub color: Vec<f64>,
}

impl ShapeParams {
    pub fn sample(cfg: &ShapesConfig, class: usize, rng: &mut impl Rng) -> Self {
        let [emin, emax] = cfg.extent;
        let a = rng.gen_range(emin..=emax);
        let b = match class {
            0 => rng.gen_range(emin..=emax),
            2 => rng.gen_range(1..=(a / 3).max(1)),
            _ => a,
        };
        let reach = a.max(b);
        let cy = rng.gen_range(reach..cfg.size - reach);
        let cx = rng.gen_range(reach..cfg.size - reach);
        let color = (0..cfg.channels)
            .map(|_| rng.gen_range(cfg.intensity[0]..=cfg.intensity[1]))
            .collect();
        ShapeParams {
            class,
            cy,
            cx,
            a,
            b,
            color,
        }
    }

    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = y.abs_diff(self.cy);
        let dx = x.abs_diff(self.cx);
        match self.class {
            0 => dy <= self.b && dx <= self.a,
            1 => dy * dy + dx * dx <= self.a * self.a,
            _ => (dy <= self.b && dx <= self.a) || (dx <= self.b && dy <= self.a),
        }
    }

    /// `C×H×W` pixels.
    pub fn render(&self, size: usize) -> Vec<f64> {
        let c = self.color.len();
        let mut out = vec![0.0; c * size * size];
        for y in 0..size {
            for x in 0..size {
                if self.covers(y, x) {
                    for (ch, &v) in self.color.iter().enumerate() {
                        out[(ch * size + y) * size + x] = v;
                    }
                }
            }
        }
        out
    }
}

/// Image `i` of the dataset: its class cycles through the classes and its
/// geometry comes from a seed derived from `(cfg.seed, i)`.
pub fn shape_at(cfg: &ShapesConfig, i: usize) -> ShapeParams {
    let mut rng = rng_from(derive_seed(cfg.seed, "shapes", i as u64));
    ShapeParams::sample(cfg, i % N_CLASSES, &mut rng)
}

/// Train and validation sets. Validation is the tail of the index order.
pub fn gen_shapes(cfg: &ShapesConfig) -> Result<(ImageSet, ImageSet)> {
    cfg.validate()?;
    let n = cfg.total();
    let item = cfg.channels * cfg.size * cfg.size;
    let mut data = Vec::with_capacity(n * item);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let s = shape_at(cfg, i);
        data.extend(s.render(cfg.size));
        labels.push(s.class);
    }
    let images = Tensor::new(vec![n, cfg.channels, cfg.size, cfg.size], data)?;
    let all = ImageSet::new(images, labels, Origin::Real)?;
    all.split(n - cfg.n_val())
}
