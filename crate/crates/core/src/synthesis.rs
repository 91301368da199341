//! Proxy training images synthesized from a classifier alone, by matching
//! the batch statistics of every batch-norm input to the stored running
//! statistics while keeping the requested class and a smooth image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{derive_seed, rng_from, ImageSet, Origin};
use crate::error::{config_err, Error, Result};
use crate::network::{apply_layers, check_input, Bound, BnMode, ForwardRecord, NetworkSpec, ParamStore};
use crate::optim::{lr_at, AdamState, ScheduleConfig};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub restarts: usize,
    pub tv_weight: f64,
    pub ce_weight: f64,
    pub stat_weight: f64,
    pub set_size: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            batch_size: 64,
            steps: 1000,
            lr: 0.05,
            lr_min: 0.0,
            restarts: 0,
            tv_weight: 1e-4,
            ce_weight: 1.0,
            stat_weight: 1.0,
            set_size: 512,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("tv_weight", self.tv_weight),
            ("ce_weight", self.ce_weight),
            ("stat_weight", self.stat_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_err!("{name} must be a finite value ≥ 0, got {w}"));
            }
        }
        if self.steps == 0 || self.batch_size < 2 || self.set_size == 0 {
            return Err(config_err!("synthesis needs steps ≥ 1, batch_size ≥ 2 and set_size ≥ 1"));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_max: self.lr,
            lr_min: self.lr_min,
            total_iters: self.steps,
            restarts: self.restarts,
        }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisLoss {
    pub ce: f64,
    pub stat: f64,
    pub tv: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub initial: SynthesisLoss,
    pub last: SynthesisLoss,
}

fn n_classes(spec: &NetworkSpec) -> Result<usize> {
    let out = spec.validate()?.pop().unwrap_or_default();
    match out.as_slice() {
        [k] if spec.has_head() => Ok(*k),
        _ => Err(config_err!("synthesis needs a classifier ending in N×K logits")),
    }
}

/// Sum over batch-norm layers of the Euclidean distances between the batch
/// mean and variance of the layer input and the stored running statistics.
/// The target runs in eval mode, so running statistics are only read.
fn stat_term(g: &mut Graph, params: &ParamStore, rec: &ForwardRecord) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(layer, input) in &rec.bn_inputs {
        let r = params.running(layer)?;
        let mu = g.channel_mean(input)?;
        let var = g.channel_var(input)?;
        let rm = g.constant(r.mean.clone());
        let rv = g.constant(r.var.clone());
        let a = g.l2_stat_loss(mu, rm)?;
        let b = g.l2_stat_loss(var, rv)?;
        let ab = g.add(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, ab)?,
            None => ab,
        });
    }
    total.ok_or_else(|| Error::Config("target has no batch-norm layers".into()))
}

struct Terms {
    logits: Var,
    stat: Var,
}

fn forward_terms(g: &mut Graph, spec: &NetworkSpec, params: &ParamStore, bound: &Bound, x: Var) -> Result<Terms> {
    let mut rec = ForwardRecord::collecting_bn_inputs();
    let logits = apply_layers(g, spec, params, bound, 0..spec.layers.len(), x, BnMode::Eval, &mut rec)?;
    let stat = stat_term(g, params, &rec)?;
    Ok(Terms { logits, stat })
}

/// Batch-statistics matching loss of `x` against the target's running
/// statistics.
pub fn bn_match_loss(spec: &NetworkSpec, params: &ParamStore, x: &Tensor) -> Result<f64> {
    check_input(x, &spec.input_shape)?;
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params);
    let xv = g.constant(x.clone());
    let terms = forward_terms(&mut g, spec, params, &bound, xv)?;
    Ok(g.value(terms.stat).item())
}

fn evaluate(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &ParamStore,
    x: &Tensor,
    labels: &[usize],
    cfg: &SynthesisConfig,
) -> Result<(Var, Var, SynthesisLoss)> {
    let bound = Bound::constants(g, params);
    let xv = g.param(x.clone());
    let terms = forward_terms(g, spec, params, &bound, xv)?;
    let ce = g.cross_entropy(terms.logits, labels)?;
    let tv = g.total_variation(xv)?;
    let wce = g.scale(ce, cfg.ce_weight)?;
    let wstat = g.scale(terms.stat, cfg.stat_weight)?;
    let wtv = g.scale(tv, cfg.tv_weight)?;
    let s = g.add(wce, wstat)?;
    let total = g.add(s, wtv)?;
    let loss = SynthesisLoss {
        ce: g.value(ce).item(),
        stat: g.value(terms.stat).item(),
        tv: g.value(tv).item(),
        total: g.value(total).item(),
    };
    Ok((xv, total, loss))
}

/// Optimizes `n` images from uniform noise toward the requested labels and
/// the target's stored statistics. Pixels are clamped to `[0, 1]` after
/// every step.
pub fn synthesize_batch(spec: &NetworkSpec, params: &ParamStore, cfg: &SynthesisConfig, n: usize, seed: u64) -> Result<SynthesisBatch> {
    cfg.validate()?;
    let k = n_classes(spec)?;
    if spec.bn_layers().is_empty() {
        return Err(Error::Config("target has no batch-norm layers".into()));
    }
    let mut rng = rng_from(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    let mut x = Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng);
    let schedule = cfg.schedule();
    let mut adam = AdamState::new();
    let mut initial = None;
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let (xv, total, loss) = evaluate(&mut g, spec, params, &x, &labels, cfg).map_err(|e| match e {
            Error::NonFinite(m) => Error::Diverged(format!("synthesis step {step}: {m}")),
            other => other,
        })?;
        initial.get_or_insert(loss);
        g.backward(total)?;
        let grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut p = std::collections::BTreeMap::from([("x".to_string(), x)]);
        let grads = std::collections::BTreeMap::from([("x".to_string(), grad)]);
        adam.step(&mut p, &grads, lr_at(&schedule, step)?)
            .map_err(|e| Error::Diverged(format!("synthesis step {step}: {e}")))?;
        x = p.remove("x").expect("inserted above").clamp(0.0, 1.0);
    }
    let mut g = Graph::new();
    let (_, _, last) = evaluate(&mut g, spec, params, &x, &labels, cfg)?;
    Ok(SynthesisBatch {
        images: x,
        labels,
        initial: initial.expect("steps ≥ 1"),
        last,
    })
}

/// A frozen synthetic dataset plus per-batch loss summaries.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub set: ImageSet,
    pub batches: Vec<(SynthesisLoss, SynthesisLoss)>,
}

/// Repeats [`synthesize_batch`] with seeds derived from `cfg.seed` until
/// `cfg.set_size` images exist. Batches run on up to `ZSINV_THREADS`
/// threads and are merged in batch order.
pub fn build_synthetic_set(spec: &NetworkSpec, params: &ParamStore, cfg: &SynthesisConfig) -> Result<SyntheticSet> {
    cfg.validate()?;
    let n_batches = cfg.set_size.div_ceil(cfg.batch_size);
    let results = par::map_indexed(n_batches, par::threads(), |b| {
        let n = cfg.batch_size.min(cfg.set_size - b * cfg.batch_size).max(2);
        let seed = derive_seed(cfg.seed, "synthesis-batch", b as u64);
        let out = synthesize_batch(spec, params, cfg, n, seed);
        if let Ok(ref r) = out {
            log::info!(
                "synthesis batch {}/{n_batches}: total {:.4} → {:.4}",
                b + 1,
                r.initial.total,
                r.last.total
            );
        }
        out
    });
    let mut images = Vec::with_capacity(n_batches);
    let mut labels = Vec::with_capacity(cfg.set_size);
    let mut batches = Vec::with_capacity(n_batches);
    for r in results {
        let r = r?;
        images.push(r.images);
        labels.extend(r.labels);
        batches.push((r.initial, r.last));
    }
    let all = Tensor::concat_batch(&images)?;
    let set = ImageSet::new(all, labels, Origin::Synthetic)?;
    let set = set.slice(0, cfg.set_size.min(set.len()));
    Ok(SyntheticSet { set, batches })
}
