use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{derive_seed, rng_from, sample_normal, ImageSet};
use crate::error::{config_err, Error, Result};
use crate::network::{
    apply_layers, forward_logits, init_params, Bound, BnMode, ForwardRecord, NetworkSpec, ParamStore, BN_MOMENTUM,
};
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(config_err!("classifier training needs epochs ≥ 1 and batches of at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and > 0, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
    pub val_accuracy: f64,
}

fn diverged(what: &str, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged(format!("{what} step {step}: {m}")),
        other => other,
    }
}

/// One graph pass over all layers in train mode; returns the output and the
/// recorded batch statistics.
fn train_forward(g: &mut Graph, spec: &NetworkSpec, params: &ParamStore, bound: &Bound, x: &Tensor) -> Result<(crate::autodiff::Var, ForwardRecord)> {
    let xv = g.constant(x.clone());
    let mut rec = ForwardRecord::default();
    let y = apply_layers(g, spec, params, bound, 0..spec.layers.len(), xv, BnMode::Train, &mut rec)?;
    Ok((y, rec))
}

/// Predicted classes in eval mode.
pub fn predict(spec: &NetworkSpec, params: &ParamStore, images: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.batch());
    let chunk = 64;
    for start in (0..images.batch()).step_by(chunk) {
        let end = (start + chunk).min(images.batch());
        let logits = forward_logits(spec, params, &images.slice_batch(start, end), BnMode::Eval)?;
        let k = logits.item_len();
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn accuracy(spec: &NetworkSpec, params: &ParamStore, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict(spec, params, images)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Cross-entropy training with Adam from a He-initialized start.
pub fn train_classifier(
    spec: &NetworkSpec,
    train: &ImageSet,
    val: &ImageSet,
    cfg: &ClassifierTrainConfig,
) -> Result<(ParamStore, ClassifierReport)> {
    cfg.validate()?;
    let mut params = init_params(spec, derive_seed(cfg.seed, "classifier-init", 0))?;
    let mut adam = AdamState::new();
    let mut report = ClassifierReport {
        epoch_loss: Vec::new(),
        epoch_val_accuracy: Vec::new(),
        val_accuracy: 0.0,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, "classifier-epoch", epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch = train.select(idx);
            let mut g = Graph::new();
            let bound = Bound::all_trainable(&mut g, &params);
            let run = |g: &mut Graph| -> Result<(crate::autodiff::Var, ForwardRecord)> {
                let (logits, rec) = train_forward(g, spec, &params, &bound, &batch.images)?;
                Ok((g.cross_entropy(logits, &batch.labels)?, rec))
            };
            let (loss, rec) = run(&mut g).map_err(|e| diverged("classifier", step, e))?;
            g.backward(loss)?;
            total += g.value(loss).item();
            batches += 1;
            let grads = bound.grads(&g);
            adam.step(&mut params.tensors, &grads, cfg.lr)
                .map_err(|e| diverged("classifier", step, e))?;
            params.update_running(&rec.batch_stats, BN_MOMENTUM)?;
            step += 1;
        }
        let acc = accuracy(spec, &params, &val.images, &val.labels)?;
        log::info!("classifier epoch {epoch}: loss {:.4}, val accuracy {acc:.3}", total / batches.max(1) as f64);
        report.epoch_loss.push(total / batches.max(1) as f64);
        report.epoch_val_accuracy.push(acc);
    }
    report.val_accuracy = accuracy(spec, &params, &val.images, &val.labels)?;
    Ok((params, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Pixel L1 regression from one fixed latent code per training image.
    Decoder,
    /// Non-saturating adversarial loss against a small critic.
    Gan,
}

impl GeneratorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorMode::Decoder => "decoder",
            GeneratorMode::Gan => "gan",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub mode: GeneratorMode,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Consecutive iterations of near-zero critic loss that count as collapse.
    pub collapse_window: usize,
}

impl GeneratorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.iters == 0 {
            return Err(config_err!("generator training needs iters ≥ 1 and batches of at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be finite and > 0, got {}", self.lr));
        }
        Ok(())
    }
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            mode: GeneratorMode::Decoder,
            iters: 1500,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            collapse_window: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub mode: GeneratorMode,
    /// Mean loss over the last 50 iterations (pixel L1 for the decoder,
    /// generator loss for the GAN).
    pub final_loss: f64,
    pub collapse_warning: bool,
}

const COLLAPSE_LOSS: f64 = 1e-3;

/// Fixed training codes of the decoder mode, one per training image.
pub fn decoder_codes(latent_dim: usize, n: usize, seed: u64) -> Tensor {
    sample_normal(&[n, latent_dim], derive_seed(seed, "decoder-codes", 0))
}

pub fn train_generator(
    spec: &NetworkSpec,
    data: &ImageSet,
    cfg: &GeneratorTrainConfig,
) -> Result<(ParamStore, GeneratorReport)> {
    if spec.input_shape.len() != 1 {
        return Err(config_err!("generator input must be a latent vector"));
    }
    cfg.validate()?;
    let d = spec.input_shape[0];
    let mut params = init_params(spec, derive_seed(cfg.seed, "generator-init", 0))?;
    let mut adam = AdamState::new();
    let mut rng = rng_from(derive_seed(cfg.seed, "generator-batches", 0));
    let mut recent = Vec::new();
    let mut collapse_warning = false;

    match cfg.mode {
        GeneratorMode::Decoder => {
            let codes = decoder_codes(d, data.len(), cfg.seed);
            for it in 0..cfg.iters {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
                let z = codes.select(&idx);
                let target = data.images.select(&idx);
                let mut g = Graph::new();
                let bound = Bound::all_trainable(&mut g, &params);
                let (out, rec) = train_forward(&mut g, spec, &params, &bound, &z).map_err(|e| diverged("generator", it, e))?;
                let t = g.constant(target);
                let loss = g.l1_loss(out, t)?;
                g.backward(loss)?;
                recent.push(g.value(loss).item());
                adam.step(&mut params.tensors, &bound.grads(&g), cfg.lr)
                    .map_err(|e| diverged("generator", it, e))?;
                params.update_running(&rec.batch_stats, BN_MOMENTUM)?;
                if it % 100 == 0 {
                    log::info!("generator iter {it}: l1 {:.4}", g.value(loss).item());
                }
            }
        }
        GeneratorMode::Gan => {
            let critic = super::models::discriminator(data.item_shape()[0], data.item_shape()[1])?;
            let mut dparams = init_params(&critic, derive_seed(cfg.seed, "critic-init", 0))?;
            let mut dadam = AdamState::new();
            let mut low_run = 0;
            for it in 0..cfg.iters {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
                let real = data.images.select(&idx);
                let z = Tensor::randn(&[cfg.batch_size, d], 1.0, &mut rng);

                // generator step
                let mut g = Graph::new();
                let gb = Bound::all_trainable(&mut g, &params);
                let db = Bound::constants(&mut g, &dparams);
                let (fake, rec) = train_forward(&mut g, spec, &params, &gb, &z).map_err(|e| diverged("generator", it, e))?;
                let mut drec = ForwardRecord::default();
                let logit = apply_layers(&mut g, &critic, &dparams, &db, 0..critic.layers.len(), fake, BnMode::Eval, &mut drec)?;
                let gloss = g.bce_with_logits(logit, 1.0)?;
                g.backward(gloss)?;
                let fake_value = g.value(fake).clone();
                recent.push(g.value(gloss).item());
                adam.step(&mut params.tensors, &gb.grads(&g), cfg.lr)
                    .map_err(|e| diverged("generator", it, e))?;
                params.update_running(&rec.batch_stats, BN_MOMENTUM)?;

                // critic step
                let mut g = Graph::new();
                let db = Bound::all_trainable(&mut g, &dparams);
                let mut drec = ForwardRecord::default();
                let rv = g.constant(real);
                let fv = g.constant(fake_value);
                let lr_ = apply_layers(&mut g, &critic, &dparams, &db, 0..critic.layers.len(), rv, BnMode::Eval, &mut drec)?;
                let lf = apply_layers(&mut g, &critic, &dparams, &db, 0..critic.layers.len(), fv, BnMode::Eval, &mut drec)?;
                let a = g.bce_with_logits(lr_, 1.0)?;
                let b = g.bce_with_logits(lf, 0.0)?;
                let dloss = g.add(a, b)?;
                g.backward(dloss)?;
                let dl = g.value(dloss).item();
                dadam.step(&mut dparams.tensors, &db.grads(&g), cfg.lr)
                    .map_err(|e| diverged("critic", it, e))?;

                low_run = if dl < COLLAPSE_LOSS { low_run + 1 } else { 0 };
                if low_run == cfg.collapse_window && !collapse_warning {
                    log::warn!("critic loss below {COLLAPSE_LOSS} for {low_run} iterations at {it}: likely mode collapse");
                    collapse_warning = true;
                }
                if it % 100 == 0 {
                    log::info!("gan iter {it}: generator {:.4}, critic {dl:.4}", recent.last().unwrap());
                }
            }
        }
    }
    let tail = &recent[recent.len().saturating_sub(50)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok((
        params,
        GeneratorReport {
            mode: cfg.mode,
            final_loss,
            collapse_warning,
        },
    ))
}

/// `N` latent codes of length `d`, i.i.d. standard normal.
pub fn sample_latent(d: usize, n: usize, seed: u64) -> Tensor {
    sample_normal(&[n, d], seed)
}
