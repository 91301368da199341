use std::cell::RefCell;
use std::collections::{BTreeSet, HashSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{cyc_graph, loss_img, loss_layer, loss_total, LossBreakdown};
use super::model::InversionModel;
use super::{Alpha, DciConfig};
use crate::autodiff::Graph;
use crate::data::{derive_seed, rng_from, BatchSource, Origin};
use crate::error::{config_err, Error, Result};
use crate::network::{forward_full, forward_sub, Bound, BnMode, ForwardRecord, NetworkSpec, ParamStore, BN_MOMENTUM};
use crate::optim::{lr_at, AdamState, ScheduleConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Module,
    Finetune,
    EndToEnd,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Module => "module",
            Phase::Finetune => "finetune",
            Phase::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: Phase,
    pub iters: usize,
    /// One record every `log_every` iterations plus the last one.
    pub records: Vec<LossBreakdown>,
    pub heldout_img_before: f64,
    pub heldout_img_after: f64,
    pub heldout_layer_before: f64,
    pub heldout_layer_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub k: usize,
    pub alpha: f64,
    pub module: PhaseLog,
    pub finetune: Option<PhaseLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DciRun {
    pub model: InversionModel,
    pub stages: Vec<StageLog>,
    /// Origins of every batch the run drew.
    pub origins_read: BTreeSet<Origin>,
}

/// Records the origin of every batch drawn through it.
struct Recording<'a> {
    inner: &'a dyn BatchSource,
    seen: RefCell<BTreeSet<Origin>>,
}

impl BatchSource for Recording<'_> {
    fn origin(&self) -> Origin {
        self.inner.origin()
    }

    fn item_shape(&self) -> Vec<usize> {
        self.inner.item_shape()
    }

    fn train_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Tensor {
        self.seen.borrow_mut().insert(self.inner.origin());
        self.inner.train_batch(rng, n)
    }

    fn heldout(&self) -> &Tensor {
        self.seen.borrow_mut().insert(self.inner.origin());
        self.inner.heldout()
    }
}

const EVAL_CHUNK: usize = 64;

fn chunked_mean(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<f64> {
    let mut s = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        s += f(start, end)? * (end - start) as f64;
    }
    Ok(s / n as f64)
}

/// Eval-mode pixel loss of the depth-`k` reconstruction of `x`.
pub fn heldout_img_loss(target: &NetworkSpec, tparams: &ParamStore, inv: &InversionModel, x: &Tensor, k: usize) -> Result<f64> {
    chunked_mean(x.batch(), |s, e| {
        let xs = x.slice_batch(s, e);
        let emb = forward_sub(target, tparams, &xs, 1, k)?;
        loss_img(&xs, &inv.reconstruct(&emb, k)?)
    })
}

fn heldout_layer_loss(target: &NetworkSpec, tparams: &ParamStore, inv: &InversionModel, x: &Tensor, k: usize) -> Result<f64> {
    chunked_mean(x.batch(), |s, e| loss_layer(target, tparams, inv, &x.slice_batch(s, e), k))
}

struct PhasePlan<'a> {
    phase: Phase,
    k: usize,
    /// Modules whose parameters are updated; they run in train mode, the
    /// rest in eval mode.
    trainable: std::ops::RangeInclusive<usize>,
    with_layer_term: bool,
    schedule: ScheduleConfig,
    cfg: &'a DciConfig,
}

fn stage_err(plan: &PhasePlan, it: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) | Error::Diverged(m) => Error::Diverged(format!(
            "stage {} {} iteration {it}: {m}",
            plan.k,
            plan.phase.as_str()
        )),
        other => other,
    }
}

/// Runs one optimization phase. `alpha` is resolved on the first batch when
/// unset and then reused.
fn run_phase(
    target: &NetworkSpec,
    tparams: &ParamStore,
    inv: &mut InversionModel,
    source: &dyn BatchSource,
    rng: &mut ChaCha8Rng,
    plan: &PhasePlan,
    alpha: &mut Option<f64>,
) -> Result<PhaseLog> {
    let k = plan.k;
    let heldout = source.heldout();
    let layer_eval = |inv: &InversionModel| -> Result<f64> {
        if plan.with_layer_term {
            heldout_layer_loss(target, tparams, inv, heldout, k)
        } else {
            Ok(0.0)
        }
    };
    let heldout_img_before = heldout_img_loss(target, tparams, inv, heldout, k)?;
    let heldout_layer_before = layer_eval(inv)?;

    let names: HashSet<String> = inv
        .module_param_names(*plan.trainable.start()..*plan.trainable.end() + 1)?
        .into_iter()
        .collect();
    let trainable = plan.trainable.clone();
    let mode = move |m: usize| if trainable.contains(&m) { BnMode::Train } else { BnMode::Eval };
    let mut adam = AdamState::new();
    let mut records = Vec::new();
    let iters = plan.schedule.total_iters;

    for it in 0..iters {
        let x = source.train_batch(rng, plan.cfg.batch_size);
        let trace = forward_full(target, tparams, &x, BnMode::Eval).map_err(|e| stage_err(plan, it, e))?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &inv.params, |n| names.contains(n));
        let tbound = Bound::constants(&mut g, tparams);
        let emb = g.constant(trace.at(k).clone());
        let mut rec = ForwardRecord::default();
        let step = (|| -> Result<(LossBreakdown, crate::autodiff::Var)> {
            let outs = inv.forward_graph(&mut g, &bound, emb, k, &mode, &mut rec)?;
            let x_rec = *outs.last().expect("k ≥ 1");
            let xv = g.constant(x.clone());
            let img = g.l1_loss(x_rec, xv)?;
            let layer = if plan.with_layer_term {
                let u = g.constant(trace.at(k - 1).clone());
                Some(g.l1_loss(outs[0], u)?)
            } else {
                None
            };
            let cyc = cyc_graph(&mut g, target, tparams, &tbound, x_rec, &trace.states)?;
            let (img_v, cyc_v) = (g.value(img).item(), g.value(cyc).item());
            let a = *alpha.get_or_insert(if cyc_v > 0.0 { img_v / cyc_v } else { 0.0 });
            let wc = g.scale(cyc, a)?;
            let mut total = g.add(img, wc)?;
            if let Some(l) = layer {
                total = g.add(l, total)?;
            }
            let layer_v = layer.map_or(0.0, |l| g.value(l).item());
            Ok((loss_total(layer_v, img_v, cyc_v, a, k, it), total))
        })();
        let (breakdown, total) = step.map_err(|e| stage_err(plan, it, e))?;
        g.backward(total)?;
        let grads = bound.grads(&g);
        adam.step(&mut inv.params.tensors, &grads, lr_at(&plan.schedule, it)?)
            .map_err(|e| stage_err(plan, it, e))?;
        inv.params.update_running(&rec.batch_stats, BN_MOMENTUM)?;
        if it % plan.cfg.log_every == 0 || it + 1 == iters {
            log::info!(
                "stage {k} {} iter {it}: layer {:.5} img {:.5} cyc {:.5} total {:.5}",
                plan.phase.as_str(),
                breakdown.layer,
                breakdown.img,
                breakdown.cyc,
                breakdown.total
            );
            records.push(breakdown);
        }
    }
    Ok(PhaseLog {
        phase: plan.phase,
        iters,
        records,
        heldout_img_before,
        heldout_img_after: heldout_img_loss(target, tparams, inv, heldout, k)?,
        heldout_layer_before,
        heldout_layer_after: layer_eval(inv)?,
    })
}

fn check_source(target: &NetworkSpec, source: &dyn BatchSource) -> Result<()> {
    if source.item_shape() != target.input_shape {
        return Err(config_err!(
            "data items {:?} do not match target input {:?}",
            source.item_shape(),
            target.input_shape
        ));
    }
    Ok(())
}

fn initial_alpha(cfg: &DciConfig) -> Option<f64> {
    match cfg.alpha {
        Alpha::Auto => None,
        Alpha::Fixed(a) => Some(a),
    }
}

/// Fits module `k` alone with modules `< k` frozen. Returns the phase log
/// and the cycle weight used.
pub fn train_module_k(
    target: &NetworkSpec,
    tparams: &ParamStore,
    inv: &mut InversionModel,
    k: usize,
    source: &dyn BatchSource,
    cfg: &DciConfig,
) -> Result<(PhaseLog, f64)> {
    cfg.validate()?;
    inv.check_target(target)?;
    check_source(target, source)?;
    inv.module_layers(k)?;
    if inv.trained_up_to + 1 < k {
        return Err(Error::Index(format!(
            "module {k} needs modules up to {} trained first, have {}",
            k - 1,
            inv.trained_up_to
        )));
    }
    let mut rng = rng_from(derive_seed(cfg.seed, "dci-module", k as u64));
    let plan = PhasePlan {
        phase: Phase::Module,
        k,
        trainable: k..=k,
        with_layer_term: true,
        schedule: cfg.module_schedule(),
        cfg,
    };
    let mut alpha = initial_alpha(cfg);
    let log = run_phase(target, tparams, inv, source, &mut rng, &plan, &mut alpha)?;
    inv.trained_up_to = inv.trained_up_to.max(k);
    Ok((log, alpha.unwrap_or(0.0)))
}

/// Jointly fine-tunes modules `1..=k` on the stage-`k` objective. Skipped
/// for `k = 1`.
pub fn finetune_up_to_k(
    target: &NetworkSpec,
    tparams: &ParamStore,
    inv: &mut InversionModel,
    k: usize,
    source: &dyn BatchSource,
    cfg: &DciConfig,
    alpha: f64,
) -> Result<Option<PhaseLog>> {
    cfg.validate()?;
    inv.check_target(target)?;
    check_source(target, source)?;
    if k > inv.trained_up_to {
        return Err(Error::Index(format!(
            "fine-tuning to depth {k} needs module {k} trained, have {}",
            inv.trained_up_to
        )));
    }
    if k <= 1 {
        return Ok(None);
    }
    let mut rng = rng_from(derive_seed(cfg.seed, "dci-finetune", k as u64));
    let plan = PhasePlan {
        phase: Phase::Finetune,
        k,
        trainable: 1..=k,
        with_layer_term: true,
        schedule: cfg.finetune_schedule(),
        cfg,
    };
    let mut a = Some(alpha);
    run_phase(target, tparams, inv, source, &mut rng, &plan, &mut a).map(Some)
}

/// Block-wise training for stages `1..=up_to`, optionally continuing a
/// previous run. `on_stage` sees the run after every completed stage.
pub fn run_dci(
    target: &NetworkSpec,
    tparams: &ParamStore,
    source: &dyn BatchSource,
    cfg: &DciConfig,
    up_to: usize,
    resume: Option<DciRun>,
    on_stage: &mut dyn FnMut(&DciRun) -> Result<()>,
) -> Result<DciRun> {
    cfg.validate()?;
    tparams.check(target)?;
    if up_to == 0 || up_to > target.num_blocks() {
        return Err(Error::Index(format!(
            "depth {up_to} outside 1..={}",
            target.num_blocks()
        )));
    }
    let rec = Recording {
        inner: source,
        seen: RefCell::new(BTreeSet::new()),
    };
    let mut run = match resume {
        Some(r) => {
            r.model.check_target(target)?;
            if r.stages.len() != r.model.trained_up_to {
                return Err(config_err!(
                    "resume state has {} stage logs for depth {}",
                    r.stages.len(),
                    r.model.trained_up_to
                ));
            }
            r
        }
        None => DciRun {
            model: InversionModel::new(target, derive_seed(cfg.seed, "dci-init", 0))?,
            stages: Vec::new(),
            origins_read: BTreeSet::new(),
        },
    };
    for k in run.model.trained_up_to + 1..=up_to {
        let (module, alpha) = train_module_k(target, tparams, &mut run.model, k, &rec, cfg)?;
        let finetune = finetune_up_to_k(target, tparams, &mut run.model, k, &rec, cfg, alpha)?;
        run.stages.push(StageLog {
            k,
            alpha,
            module,
            finetune,
        });
        run.origins_read.extend(rec.seen.borrow().iter().copied());
        on_stage(&run)?;
    }
    run.origins_read.extend(rec.seen.borrow().iter().copied());
    Ok(run)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRun {
    pub model: InversionModel,
    pub log: PhaseLog,
    pub budget: usize,
    pub alpha: f64,
}

/// The mirrored architecture trained on all modules `1..=k` at once, from
/// the same initialization as [`run_dci`], on the pixel and cycle terms for
/// the same total iteration count.
pub fn train_end_to_end_baseline(
    target: &NetworkSpec,
    tparams: &ParamStore,
    source: &dyn BatchSource,
    cfg: &DciConfig,
    k: usize,
) -> Result<BaselineRun> {
    cfg.validate()?;
    check_source(target, source)?;
    let mut model = InversionModel::new(target, derive_seed(cfg.seed, "dci-init", 0))?;
    model.module_layers(k)?;
    let budget = cfg.budget(k);
    let plan = PhasePlan {
        phase: Phase::EndToEnd,
        k,
        trainable: 1..=k,
        with_layer_term: false,
        schedule: ScheduleConfig {
            lr_max: cfg.lr_module,
            lr_min: cfg.lr_module * cfg.lr_min_ratio,
            total_iters: budget,
            restarts: cfg.restarts,
        },
        cfg,
    };
    let mut rng = rng_from(derive_seed(cfg.seed, "end-to-end", k as u64));
    let mut alpha = initial_alpha(cfg);
    let log = run_phase(target, tparams, &mut model, source, &mut rng, &plan, &mut alpha)?;
    model.trained_up_to = k;
    Ok(BaselineRun {
        model,
        log,
        budget,
        alpha: alpha.unwrap_or(0.0),
    })
}
