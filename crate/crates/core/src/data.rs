//! Image sets, batch sources and seed derivation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// Where a set of inputs came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Drawn from the dataset the target was trained on.
    Real,
    /// Produced from the target alone.
    Synthetic,
    /// Sampled latent codes.
    Latent,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
            Origin::Latent => "latent",
        }
    }
}

/// Labeled images, `N×C×H×W` with labels in `[0, n_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub origin: Origin,
}

impl ImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, origin: Origin) -> Result<Self> {
        images.dims4()?;
        if images.batch() != labels.len() {
            return Err(shape_err!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            ));
        }
        Ok(ImageSet {
            images,
            labels,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origin: self.origin,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> ImageSet {
        self.select(&(start..end).collect::<Vec<_>>())
    }

    /// First `n` items and the rest.
    pub fn split(&self, n: usize) -> Result<(ImageSet, ImageSet)> {
        if n == 0 || n >= self.len() {
            return Err(config_err!("cannot split {} items at {n}", self.len()));
        }
        Ok((self.slice(0, n), self.slice(n, self.len())))
    }
}

/// Supplies inversion training inputs.
pub trait BatchSource {
    fn origin(&self) -> Origin;
    /// Per-sample input shape.
    fn item_shape(&self) -> Vec<usize>;
    /// Random training batch of `n` inputs.
    fn train_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Tensor;
    /// Fixed held-out inputs, never used for gradient steps.
    fn heldout(&self) -> &Tensor;
}

/// Images split into a training pool and a held-out part.
#[derive(Clone, Debug)]
pub struct ImageSource {
    pub train: Tensor,
    pub heldout: Tensor,
    pub origin: Origin,
}

impl ImageSource {
    /// Holds out the last `n_heldout` images of `set`.
    pub fn from_set(set: &ImageSet, n_heldout: usize) -> Result<Self> {
        let (train, held) = set.split(set.len() - n_heldout.min(set.len()))?;
        Ok(ImageSource {
            train: train.images,
            heldout: held.images,
            origin: set.origin,
        })
    }
}

impl BatchSource for ImageSource {
    fn origin(&self) -> Origin {
        self.origin
    }

    fn item_shape(&self) -> Vec<usize> {
        self.train.shape()[1..].to_vec()
    }

    fn train_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Tensor {
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.train.batch())).collect();
        self.train.select(&idx)
    }

    fn heldout(&self) -> &Tensor {
        &self.heldout
    }
}

/// Standard normal latent codes.
#[derive(Clone, Debug)]
pub struct LatentSource {
    pub dim: usize,
    pub heldout: Tensor,
}

impl LatentSource {
    pub fn new(dim: usize, n_heldout: usize, seed: u64) -> Self {
        LatentSource {
            dim,
            heldout: sample_normal(&[n_heldout, dim], seed),
        }
    }
}

impl BatchSource for LatentSource {
    fn origin(&self) -> Origin {
        Origin::Latent
    }

    fn item_shape(&self) -> Vec<usize> {
        vec![self.dim]
    }

    fn train_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Tensor {
        Tensor::from_fn(&[n, self.dim], |_| rng.sample(StandardNormal))
    }

    fn heldout(&self) -> &Tensor {
        &self.heldout
    }
}

/// I.i.d. standard normal tensor, deterministic per seed.
pub fn sample_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

pub fn rng_from(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for stream `tag`, item `index`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(base);
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ splitmix(index))
}
