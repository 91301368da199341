use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{param_name, LayerOp, NetworkSpec};
use crate::autodiff::BatchStats;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Batch-norm moving averages of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    /// `(1 − momentum)·old + momentum·batch` for both moments.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Named parameter tensors plus batch-norm running statistics keyed by
/// layer index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
    pub running: BTreeMap<usize, RunningStats>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn running(&self, layer: usize) -> Result<&RunningStats> {
        self.running
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("missing running statistics for layer {layer}")))
    }

    /// Applies the moving-average update for every recorded batch.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)], momentum: f64) -> Result<()> {
        for (layer, b) in stats {
            let r = self
                .running
                .get_mut(layer)
                .ok_or_else(|| Error::Config(format!("no running statistics for layer {layer}")))?;
            r.update(b, momentum);
        }
        Ok(())
    }

    /// Checks names and shapes against a spec.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        for (name, shape) in spec.param_shapes()? {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("{name} has shape {:?}, spec wants {shape:?}", t.shape()));
            }
        }
        for layer in spec.bn_layers() {
            let r = self.running(layer)?;
            if r.var.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Config(format!("negative running variance at layer {layer}")));
            }
        }
        Ok(())
    }

    /// Flat view for persistence: parameters under their own names, running
    /// statistics as `"<layer>.running_mean"` / `"<layer>.running_var"`.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.tensors.clone();
        for (layer, r) in &self.running {
            out.insert(param_name(*layer, "running_mean"), r.mean.clone());
            out.insert(param_name(*layer, "running_var"), r.var.clone());
        }
        out
    }

    pub fn from_named(mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut running = BTreeMap::new();
        let keys: Vec<String> = named
            .keys()
            .filter(|k| k.ends_with(".running_mean"))
            .cloned()
            .collect();
        for key in keys {
            let layer: usize = key
                .trim_end_matches(".running_mean")
                .parse()
                .map_err(|_| Error::Config(format!("bad running-stat key {key}")))?;
            let mean = named.remove(&key).expect("key listed above");
            let var = named
                .remove(&param_name(layer, "running_var"))
                .ok_or_else(|| Error::Config(format!("running_var missing for layer {layer}")))?;
            running.insert(layer, RunningStats { mean, var });
        }
        Ok(ParamStore {
            tensors: named,
            running,
        })
    }

    /// Names of the parameters belonging to the given layers.
    pub fn names_in_layers(&self, layers: std::ops::Range<usize>) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|k| {
                k.split('.')
                    .next()
                    .and_then(|p| p.parse::<usize>().ok())
                    .is_some_and(|l| layers.contains(&l))
            })
            .cloned()
            .collect()
    }
}

/// Number of inputs contributing to one output of a weighted layer.
fn fan_in(op: &LayerOp) -> f64 {
    match *op {
        LayerOp::Conv {
            in_channels, kernel, ..
        } => (in_channels * kernel * kernel) as f64,
        LayerOp::ConvTranspose {
            in_channels,
            kernel,
            stride,
            ..
        } => ((in_channels * kernel * kernel) as f64 / (stride * stride) as f64).max(1.0),
        LayerOp::Dense { in_features, .. } => in_features as f64,
        _ => 1.0,
    }
}

/// He-normal weights, zero biases, unit `γ`, zero `β`, running `μ = 0`,
/// `σ² = 1`. Deterministic per seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamStore> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for (name, shape) in shapes {
        let (layer, what) = name.split_once('.').expect("param names are layer.kind");
        let layer: usize = layer.parse().expect("numeric layer index");
        let t = match what {
            "weight" => {
                let std = (2.0 / fan_in(&spec.layers[layer].op)).sqrt();
                Tensor::randn(&shape, std, &mut rng)
            }
            "gamma" => Tensor::ones(&shape),
            _ => Tensor::zeros(&shape),
        };
        store.tensors.insert(name, t);
    }
    let shapes = spec.validate()?;
    for layer in spec.bn_layers() {
        store
            .running
            .insert(layer, RunningStats::identity(shapes[layer][0]));
    }
    Ok(store)
}
