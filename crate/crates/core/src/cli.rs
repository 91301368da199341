//! Command-line surface. Every command reads its inputs from checkpoints,
//! writes a run manifest before doing any work and writes its outputs into
//! `--out`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{derive_seed, BatchSource, ImageSet, ImageSource, LatentSource, Origin};
use crate::dci::{run_dci, DciRun};
use crate::error::{Error, Result};
use crate::eval::{
    adversarial_gap, depth_sweep, input_opt_invert, interpolate_latents, latent_recover_eval,
    real_vs_generated_eval, reconstruct_from_depth, reproject, MetricsReport,
};
use crate::io::{
    export_image, load_dataset, load_inversion, load_network, parse_config, save_dataset, save_inversion,
    save_network, tile, write_atomic, Config, RunManifest, SavedDataset, SavedNetwork,
};
use crate::network::forward_sub;
use crate::synthesis::build_synthetic_set;
use crate::tensor::Tensor;
use crate::zoo::{
    accuracy, gen_shapes, micro_gen, micro_vgg, sample_latent, train_classifier, train_generator,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const DATA_FILE: &str = "data.ckpt";
pub const TARGET_FILE: &str = "target.ckpt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const SYNTHETIC_FILE: &str = "synthetic.ckpt";
pub const TARGET_INVERSION_FILE: &str = "inversion-target.ckpt";
pub const GENERATOR_INVERSION_FILE: &str = "inversion-generator.ckpt";

#[derive(Parser, Debug)]
#[command(name = "zsinv", version, about = "Zero-shot block-wise inversion of convolutional networks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration document (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, also the default location of inputs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Checkpoint to resume from (invert-train only).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct Inputs {
    /// Dataset checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target classifier or generator checkpoint.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Inversion checkpoint.
    #[arg(long)]
    inversion: Option<PathBuf>,
    /// Depth override.
    #[arg(long)]
    depth: Option<usize>,
    /// Number of images override.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render the shapes dataset.
    GenData(#[command(flatten)] Common),
    /// Train the classifier on the shapes dataset.
    TrainTarget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the image generator on the shapes dataset.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Synthesize proxy images from the classifier's statistics.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Train the block-wise inverse of a classifier or generator.
    InvertTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Reconstruct images from their features with a trained inverse.
    InvertRun {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Reconstruction quality at every configured depth.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Inversion of adversarially versus randomly perturbed images.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Latent recovery, interpolation and reprojection for the generator.
    GanEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Inversion by direct input optimization.
    BaselineOpt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Write dataset images as a PGM/PPM grid.
    ExportImages {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData(_) => "gen-data",
            Cmd::TrainTarget { .. } => "train-target",
            Cmd::TrainGan { .. } => "train-gan",
            Cmd::Synthesize { .. } => "synthesize",
            Cmd::InvertTrain { .. } => "invert-train",
            Cmd::InvertRun { .. } => "invert-run",
            Cmd::Sweep { .. } => "sweep",
            Cmd::Attack { .. } => "attack",
            Cmd::GanEval { .. } => "gan-eval",
            Cmd::BaselineOpt { .. } => "baseline-opt",
            Cmd::ExportImages { .. } => "export-images",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::GenData(c) => c,
            Cmd::TrainTarget { common, .. }
            | Cmd::TrainGan { common, .. }
            | Cmd::Synthesize { common, .. }
            | Cmd::InvertTrain { common, .. }
            | Cmd::InvertRun { common, .. }
            | Cmd::Sweep { common, .. }
            | Cmd::Attack { common, .. }
            | Cmd::GanEval { common, .. }
            | Cmd::BaselineOpt { common, .. }
            | Cmd::ExportImages { common, .. } => common,
        }
    }

    fn split(self) -> (Common, Inputs) {
        match self {
            Cmd::GenData(c) => (c, Inputs::default()),
            Cmd::TrainTarget { common, data } | Cmd::TrainGan { common, data } => (
                common,
                Inputs {
                    data,
                    ..Default::default()
                },
            ),
            Cmd::Synthesize { common, target } => (
                common,
                Inputs {
                    target,
                    ..Default::default()
                },
            ),
            Cmd::InvertTrain { common, inputs }
            | Cmd::InvertRun { common, inputs }
            | Cmd::Sweep { common, inputs }
            | Cmd::Attack { common, inputs }
            | Cmd::GanEval { common, inputs }
            | Cmd::BaselineOpt { common, inputs }
            | Cmd::ExportImages { common, inputs } => (common, inputs),
        }
    }
}

/// Per-run state: resolved configuration, manifest and output directory.
struct Ctx {
    cmd: &'static str,
    out: PathBuf,
    cfg: Config,
    manifest: RunManifest,
    manifest_path: PathBuf,
    records: Vec<u8>,
}

impl Ctx {
    fn run_id(&self) -> String {
        self.manifest.run_id.clone()
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.manifest.begin(name);
        let r = f(self);
        self.manifest.end();
        r
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        if !self.manifest.outputs.contains(&p) {
            self.manifest.outputs.push(p.clone());
        }
        p
    }

    /// Emits one structured record on stdout and into the run's record file.
    fn record(&mut self, kind: &str, body: impl Serialize) -> Result<()> {
        let mut v = json!({ "record": kind, "run_id": self.manifest.run_id });
        if let (Value::Object(m), Value::Object(b)) = (&mut v, serde_json::to_value(body)?) {
            m.extend(b);
        }
        let line = serde_json::to_string(&v)?;
        println!("{line}");
        self.records.extend_from_slice(line.as_bytes());
        self.records.push(b'\n');
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if !self.records.is_empty() {
            let p = self.output(&format!("{}.jsonl", self.cmd));
            write_atomic(&p, &self.records)?;
        }
        self.manifest.save(&self.manifest_path)
    }
}

fn resolve(common_out: &Path, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| common_out.join(default))
}

/// Arguments that repeat a run from its manifest: the configuration points
/// at the resolved snapshot, the seed is already part of it and every input
/// is named explicitly.
fn replay_args(cmd: &str, argv: &[String], snapshot: &Path, inputs: &[(&str, PathBuf)]) -> Vec<String> {
    let mut out = vec![cmd.to_string(), "--config".into(), snapshot.display().to_string()];
    let mut it = argv.iter().skip_while(|a| a.as_str() != cmd).skip(1);
    while let Some(a) = it.next() {
        let (flag, inline) = match a.split_once('=') {
            Some((f, v)) if f.starts_with("--") => (f, Some(v)),
            _ => (a.as_str(), None),
        };
        if flag == "--config" || flag == "--seed" {
            if inline.is_none() {
                it.next();
            }
            continue;
        }
        out.push(a.clone());
    }
    for (flag, path) in inputs {
        if !out.iter().any(|a| a == flag || a.starts_with(&format!("{flag}="))) {
            out.push(flag.to_string());
            out.push(path.display().to_string());
        }
    }
    out
}

fn setup(cmd: &'static str, common: &Common, inputs: &[(&str, PathBuf)], argv: &[String]) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    let snapshot = common.out.join(format!("{cmd}.config.toml"));
    let text = cfg.to_toml()?;
    let owned: Vec<(String, PathBuf)> = inputs.iter().map(|(f, p)| (f.to_string(), p.clone())).collect();
    let mut manifest = RunManifest::new(cmd, replay_args(cmd, argv, &snapshot, inputs), cfg.seed, text.clone(), &owned)?;
    write_atomic(&snapshot, text.as_bytes())?;
    manifest.outputs.push(snapshot);
    let manifest_path = common.out.join(format!("{cmd}.manifest.json"));
    manifest.save(&manifest_path)?;
    Ok(Ctx {
        cmd,
        out: common.out.clone(),
        cfg,
        manifest,
        manifest_path,
        records: Vec::new(),
    })
}

fn eval_images(ds: &SavedDataset, n: usize) -> ImageSet {
    let set = ds.val.as_ref().unwrap_or(&ds.train);
    set.slice(0, n.min(set.len()))
}

fn write_grid(ctx: &mut Ctx, name: &str, images: &Tensor) -> Result<()> {
    if images.rank() != 4 {
        return Ok(());
    }
    let grid = tile(images, ctx.cfg.run.grid_cols)?;
    let p = ctx.output(name);
    export_image(&grid, &p)
}

fn load_target_pair(target: &Path, inversion: &Path) -> Result<(SavedNetwork, DciRun)> {
    let net = load_network(target, &["target", "generator"])?;
    let (run, _) = load_inversion(inversion)?;
    if run.model.target != net.spec {
        return Err(Error::Config(format!(
            "{} was trained for a different network than {}",
            inversion.display(),
            target.display()
        )));
    }
    Ok((net, run))
}

fn depth_for(inputs: &Inputs, ctx: &Ctx, run: &DciRun) -> Result<usize> {
    let k = inputs.depth.unwrap_or(ctx.cfg.run.depth);
    if k == 0 || k > run.model.trained_up_to {
        return Err(Error::Index(format!(
            "depth {k} requested but the inverse is trained up to {}",
            run.model.trained_up_to
        )));
    }
    Ok(k)
}

fn execute(cmd: Cmd, argv: &[String]) -> Result<()> {
    let name = cmd.name();
    let (common, inputs) = cmd.split();
    let out = common.out.clone();
    match name {
        "gen-data" => {
            let mut ctx = setup(name, &common, &[], argv)?;
            let (train, val) = ctx.stage("render", |c| gen_shapes(&c.cfg.data))?;
            let ds = SavedDataset {
                train,
                val: Some(val),
                run_id: ctx.run_id(),
            };
            let p = ctx.output(DATA_FILE);
            save_dataset(&ds, &p)?;
            ctx.record("dataset", json!({ "train": ds.train.len(), "val": ds.val.as_ref().map(|v| v.len()) }))?;
            ctx.finish()
        }
        "train-target" => {
            let data = resolve(&out, &inputs.data, DATA_FILE);
            let mut ctx = setup(name, &common, &[("--data", data.clone())], argv)?;
            let ds = load_dataset(&data)?;
            let val = ds.val.clone().ok_or_else(|| Error::Config("training needs a validation split".into()))?;
            let spec = micro_vgg(&ctx.cfg.target)?;
            let (params, report) = ctx.stage("train", |c| train_classifier(&spec, &ds.train, &val, &c.cfg.classifier))?;
            let net = SavedNetwork {
                kind: "target".into(),
                spec,
                params,
                report: serde_json::to_value(&report)?,
                run_id: ctx.run_id(),
            };
            let p = ctx.output(TARGET_FILE);
            save_network(&net, &p)?;
            ctx.record("classifier", &report)?;
            ctx.finish()
        }
        "train-gan" => {
            let data = resolve(&out, &inputs.data, DATA_FILE);
            let mut ctx = setup(name, &common, &[("--data", data.clone())], argv)?;
            let ds = load_dataset(&data)?;
            let spec = micro_gen(&ctx.cfg.generator_model)?;
            let (params, report) = ctx.stage("train", |c| train_generator(&spec, &ds.train, &c.cfg.generator))?;
            if report.collapse_warning {
                log::warn!("critic loss stayed near zero: possible mode collapse");
            }
            let samples = crate::eval::generate(&spec, &params, &sample_latent(spec.input_shape[0], 16, 0))?;
            let net = SavedNetwork {
                kind: "generator".into(),
                spec,
                params,
                report: serde_json::to_value(&report)?,
                run_id: ctx.run_id(),
            };
            let p = ctx.output(GENERATOR_FILE);
            save_network(&net, &p)?;
            write_grid(&mut ctx, "generator-samples.pgm", &samples)?;
            ctx.record("generator", &report)?;
            ctx.finish()
        }
        "synthesize" => {
            let target = resolve(&out, &inputs.target, TARGET_FILE);
            let mut ctx = setup(name, &common, &[("--target", target.clone())], argv)?;
            let net = load_network(&target, &["target"])?;
            let syn = ctx.stage("synthesize", |c| build_synthetic_set(&net.spec, &net.params, &c.cfg.synthesis))?;
            let acc = accuracy(&net.spec, &net.params, &syn.set.images, &syn.set.labels)?;
            let n = syn.batches.len() as f64;
            let initial = syn.batches.iter().map(|b| b.0.total).sum::<f64>() / n;
            let last = syn.batches.iter().map(|b| b.1.total).sum::<f64>() / n;
            let ds = SavedDataset {
                train: syn.set,
                val: None,
                run_id: ctx.run_id(),
            };
            let p = ctx.output(SYNTHETIC_FILE);
            save_dataset(&ds, &p)?;
            let preview = ds.train.images.slice_batch(0, ds.train.len().min(32));
            write_grid(&mut ctx, "synthetic.pgm", &preview)?;
            ctx.record(
                "synthesis",
                json!({ "images": ds.train.len(), "loss_initial": initial, "loss_final": last, "target_accuracy": acc }),
            )?;
            ctx.finish()
        }
        "invert-train" => {
            let target = resolve(&out, &inputs.target, TARGET_FILE);
            let net = load_network(&target, &["target", "generator"])?;
            let is_gen = net.kind == "generator";
            let mut files = vec![("--target", target.clone())];
            let data = resolve(&out, &inputs.data, SYNTHETIC_FILE);
            if !is_gen {
                files.push(("--data", data.clone()));
            }
            if let Some(r) = &common.resume {
                files.push(("--resume", r.clone()));
            }
            let mut ctx = setup(name, &common, &files, argv)?;
            let cfg = ctx.cfg.clone();
            let source: Box<dyn BatchSource> = if is_gen {
                let d = net.spec.input_shape[0];
                Box::new(LatentSource::new(d, cfg.run.heldout, derive_seed(cfg.dci.seed, "latent-heldout", 0)))
            } else {
                let ds = load_dataset(&data)?;
                if ds.train.origin != Origin::Synthetic {
                    log::warn!("inverse trained on {} images, not a zero-shot run", ds.train.origin.as_str());
                }
                Box::new(ImageSource::from_set(&ds.train, cfg.run.heldout)?)
            };
            let depth = if is_gen {
                net.spec.num_blocks()
            } else {
                inputs.depth.unwrap_or(cfg.run.depth)
            };
            let resume = match &common.resume {
                Some(p) => Some(load_inversion(p)?.0),
                None => None,
            };
            let file = ctx.output(if is_gen { GENERATOR_INVERSION_FILE } else { TARGET_INVERSION_FILE });
            let run_id = ctx.run_id();
            let mut stage_records = Vec::new();
            let run = ctx.stage("train", |_| {
                run_dci(&net.spec, &net.params, source.as_ref(), &cfg.dci, depth, resume, &mut |r| {
                    save_inversion(r, &run_id, &file)?;
                    let s = r.stages.last().expect("called after a stage");
                    log::info!("stage {} done: held-out image loss {:.4}", s.k, s.finetune.as_ref().unwrap_or(&s.module).heldout_img_after);
                    stage_records.push(s.clone());
                    Ok(())
                })
            })?;
            for s in &stage_records {
                ctx.record(
                    "stage",
                    json!({
                        "k": s.k,
                        "alpha": s.alpha,
                        "module_heldout_img": [s.module.heldout_img_before, s.module.heldout_img_after],
                        "module_heldout_layer": [s.module.heldout_layer_before, s.module.heldout_layer_after],
                        "finetune_heldout_img": s.finetune.as_ref().map(|f| [f.heldout_img_before, f.heldout_img_after]),
                    }),
                )?;
            }
            ctx.record("inversion", json!({ "trained_up_to": run.model.trained_up_to, "origins": run.origins_read }))?;
            ctx.finish()
        }
        "invert-run" | "sweep" | "attack" | "baseline-opt" => {
            let target = resolve(&out, &inputs.target, TARGET_FILE);
            let data = resolve(&out, &inputs.data, DATA_FILE);
            let inversion = resolve(&out, &inputs.inversion, TARGET_INVERSION_FILE);
            let mut files = vec![("--target", target.clone()), ("--data", data.clone())];
            if name != "baseline-opt" {
                files.push(("--inversion", inversion.clone()));
            }
            let mut ctx = setup(name, &common, &files, argv)?;
            let ds = load_dataset(&data)?;
            let test = eval_images(&ds, inputs.n.unwrap_or(ctx.cfg.run.n_images));
            if name == "baseline-opt" {
                let net = load_network(&target, &["target"])?;
                let k = inputs.depth.unwrap_or(ctx.cfg.run.depth);
                let emb = forward_sub(&net.spec, &net.params, &test.images, 1, k)?;
                let t0 = Instant::now();
                let r = ctx.stage("optimize", |c| input_opt_invert(&net.spec, &net.params, &emb, k, &c.cfg.input_opt))?;
                let secs = t0.elapsed().as_secs_f64();
                let report = MetricsReport::measure(format!("input optimization, depth {k}"), ctx.cfg.input_opt.seed, &net.spec, &net.params, &test.images, &r.image)?;
                write_grid(&mut ctx, "baseline-opt.pgm", &r.image)?;
                ctx.record("baseline_opt", json!({ "depth": k, "seconds": secs, "best_loss": r.best_loss, "best_step": r.best_step, "report": report }))?;
                return ctx.finish();
            }
            let (net, run) = load_target_pair(&target, &inversion)?;
            match name {
                "invert-run" => {
                    let k = depth_for(&inputs, &ctx, &run)?;
                    let t0 = Instant::now();
                    let rec = reconstruct_from_depth(&net.spec, &net.params, &run.model, &test.images, k)?;
                    let secs = t0.elapsed().as_secs_f64();
                    let report = MetricsReport::measure(format!("depth {k}"), ctx.cfg.dci.seed, &net.spec, &net.params, &test.images, &rec)?;
                    write_grid(&mut ctx, "original.pgm", &test.images)?;
                    write_grid(&mut ctx, "reconstruction.pgm", &rec)?;
                    ctx.record("invert_run", json!({ "depth": k, "seconds": secs, "report": report }))?;
                }
                "sweep" => {
                    let depths = ctx.cfg.run.depths.clone();
                    let models: Vec<_> = depths.iter().map(|&k| (k, &run.model)).collect();
                    let r = ctx.stage("sweep", |_| depth_sweep(&net.spec, &net.params, &models, &test.images))?;
                    for row in r.rows {
                        ctx.record("sweep", &row)?;
                    }
                }
                _ => {
                    let k = depth_for(&inputs, &ctx, &run)?;
                    let acfg = ctx.cfg.attack.clone();
                    let gap = ctx.stage("attack", |_| adversarial_gap(&net.spec, &net.params, &run.model, &test.images, &test.labels, k, &acfg))?;
                    ctx.record("attack", &gap)?;
                }
            }
            ctx.finish()
        }
        "gan-eval" => {
            let target = resolve(&out, &inputs.target, GENERATOR_FILE);
            let inversion = resolve(&out, &inputs.inversion, GENERATOR_INVERSION_FILE);
            let data = resolve(&out, &inputs.data, DATA_FILE);
            let files = [("--target", target.clone()), ("--inversion", inversion.clone()), ("--data", data.clone())];
            let mut ctx = setup(name, &common, &files, argv)?;
            let (net, run) = load_target_pair(&target, &inversion)?;
            if net.kind != "generator" {
                return Err(Error::Config(format!("{} is not a generator checkpoint", target.display())));
            }
            let inv = &run.model;
            let (spec, params) = (&net.spec, &net.params);
            let ds = load_dataset(&data)?;
            let n = inputs.n.unwrap_or(ctx.cfg.run.gan_samples);
            let seed = derive_seed(ctx.cfg.generator.seed, "gan-eval", 0);
            let rec = latent_recover_eval(spec, params, inv, n, seed)?;
            ctx.record("latent_recovery", &rec)?;
            let z = sample_latent(spec.input_shape[0], n, derive_seed(seed, "reproject", 0)).map(|v| 3.0 * v);
            let rp = reproject(spec, params, inv, &z)?;
            ctx.record(
                "reprojection",
                json!({ "scale": 3.0, "latent_norm_mean": rp.latent_norm_mean, "recovered_norm_mean": rp.recovered_norm_mean, "sqrt_dim": (spec.input_shape[0] as f64).sqrt() }),
            )?;
            let real = eval_images(&ds, n).images;
            let rvg = real_vs_generated_eval(spec, params, inv, &real, n.min(real.batch()), seed)?;
            ctx.record("real_vs_generated", &rvg)?;
            let frames = interpolate_latents(spec, params, inv, &real.slice_batch(0, 1), &real.slice_batch(1, 2), ctx.cfg.run.interpolation_steps)?;
            let strip = Tensor::concat_batch(&frames)?;
            write_grid(&mut ctx, "interpolation.pgm", &strip)?;
            let rp_n = rp.images.batch().min(16);
            write_grid(&mut ctx, "reprojection.pgm", &rp.images.slice_batch(0, rp_n))?;
            ctx.finish()
        }
        "export-images" => {
            let data = resolve(&out, &inputs.data, DATA_FILE);
            let mut ctx = setup(name, &common, &[("--data", data.clone())], argv)?;
            let ds = load_dataset(&data)?;
            let n = inputs.n.unwrap_or(ctx.cfg.run.n_images).min(ds.train.len());
            let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into());
            let imgs = ds.train.images.slice_batch(0, n);
            let ext = if imgs.shape()[1] == 3 { "ppm" } else { "pgm" };
            write_grid(&mut ctx, &format!("export-{stem}.{ext}"), &imgs)?;
            ctx.record("export", json!({ "images": n, "origin": ds.train.origin }))?;
            ctx.finish()
        }
        _ => unreachable!("every subcommand is matched"),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.cmd.common().resume.is_some() && cli.cmd.name() != "invert-train" {
        eprintln!("zsinv: --resume is only accepted by invert-train");
        return EXIT_USAGE;
    }
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.cmd, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(std::io::stderr(), "zsinv: {msg}");
            EXIT_FAILURE
        }
    }
}
