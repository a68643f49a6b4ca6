//! Subcommands of the `modgat` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use modgat::autodiff::Fault;
use modgat::graph::PreparedGraph;
use modgat::segment::{dataset_report, decode_mask, iou_dice, BinaryMask, MetricResult};
use modgat::synth::{generate, SynthConfig};
use modgat::train::{train_collective_prepared, train_many_prepared, TrainOutcome};
use modgat::verify::{gradcheck_instance, model_grad_check};
use modgat::{read_feature_matrix, Activation, Error, FeatureMatrix64, ModelConfig, TrainConfig, TrainMode};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "modgat", version, about = "Unsupervised patch-graph segmentation with modularity-trained graph attention networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on every `<stem>.mgt` + `<stem>.meta` pair and write masks.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Write a planted-partition feature set.
    Synth(SynthArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Silu,
    Selu,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Silu => Activation::Silu,
            ActivationArg::Selu => Activation::Selu,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerImage,
    Collective,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Directory of feature + meta pairs.
    #[arg(long = "in", required_unless_present = "manifest")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Re-run exactly the configuration and inputs recorded in a manifest.
    #[arg(long, conflicts_with = "input")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long = "weight-decay", default_value_t = 1e-2)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Comma-separated per-branch widths; the branch count is their number.
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long = "agg-dim", default_value_t = 64)]
    pub agg_dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::PerImage)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 15)]
    pub t0: usize,
    #[arg(long, default_value_t = 55)]
    pub t1: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted `<stem>.pgm` masks.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory of ground-truth `<stem>.pgm` or `<stem>.mgt` masks.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub nodes: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Expected norm of the noise added to each unit block centre.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value = "synth")]
    pub stem: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long = "max-nodes", default_value_t = 12)]
    pub max_nodes: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    pub activation: ActivationArg,
    /// Flip the sign of one backward rule (checker self-test).
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: bool,
}

pub fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Segment(a) => cmd_segment(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputPair {
    pub stem: String,
    pub features: PathBuf,
    pub meta: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub stem: String,
    pub mask: PathBuf,
    pub loss_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub fg_cluster: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub stem: String,
    pub reason: String,
}

/// Everything needed to reproduce a `segment` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub inputs: Vec<InputPair>,
    pub outputs: Vec<OutputRecord>,
    pub skipped: Vec<SkippedRecord>,
}

impl RunManifest {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Sorted `<stem>.mgt` files that have a `<stem>.meta` sidecar.
pub fn discover_inputs(dir: &Path) -> anyhow::Result<Vec<InputPair>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_none_or(|e| e != "mgt") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let meta = path.with_extension("meta");
        if meta.is_file() {
            out.push(InputPair {
                stem: stem.to_string(),
                features: path.clone(),
                meta,
            });
        }
    }
    out.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(out)
}

fn configs_from_args(a: &SegmentArgs) -> (TrainConfig, ModelConfig) {
    let train = TrainConfig {
        lr: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        tau: a.tau,
        mode: match a.mode {
            ModeArg::PerImage => TrainMode::PerImage,
            ModeArg::Collective => TrainMode::Collective,
        },
        t0: a.t0,
        t1: a.t1,
        jobs: a.jobs,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        branches: a.dims.len(),
        layers_per_branch: a.layers,
        branch_dims: a.dims.clone(),
        agg_dim: a.agg_dim,
        clusters: a.k,
        heads: a.heads,
        activation: a.activation.into(),
        seed: a.seed,
        ..ModelConfig::default()
    };
    (train, model)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn cmd_segment(a: &SegmentArgs) -> anyhow::Result<u8> {
    let (train, model, inputs) = match &a.manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            (m.train, m.model, m.inputs)
        }
        None => {
            let (train, model) = configs_from_args(a);
            let dir = a.input.as_ref().expect("clap enforces --in without --manifest");
            (train, model, discover_inputs(dir)?)
        }
    };
    train.validate()?;
    model.validate()?;
    if inputs.is_empty() {
        bail!("no <stem>.mgt + <stem>.meta pairs found");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut failures = Vec::new();
    let mut prepared = Vec::new();
    let mut skipped = Vec::new();
    for pair in &inputs {
        let fm: FeatureMatrix64 = match read_feature_matrix(&pair.features, &pair.meta) {
            Ok(fm) => fm,
            Err(e) => {
                failures.push(format!("{}: {e}", pair.stem));
                continue;
            }
        };
        match PreparedGraph::from_features(&fm.features, train.tau) {
            Ok(img) => prepared.push((pair, fm, img)),
            Err(e @ Error::EmptyGraph { .. }) => {
                warn!("skipping {}: {e}", pair.stem);
                skipped.push(SkippedRecord {
                    stem: pair.stem.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => failures.push(format!("{}: {e}", pair.stem)),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("error: {f}");
        }
        return Ok(1);
    }
    info!("training {} image(s) in {:?} mode", prepared.len(), train.mode);

    let images: Vec<PreparedGraph<f64>> = prepared.iter().map(|(_, _, img)| img.clone()).collect();
    let outcomes: Vec<TrainOutcome<f64>> = if images.is_empty() {
        Vec::new()
    } else {
        match train.mode {
            TrainMode::PerImage => train_many_prepared(&images, &train, &model)?,
            TrainMode::Collective => train_collective_prepared(&images, &train, &model)?,
        }
    };

    let mut outputs = Vec::with_capacity(outcomes.len());
    for ((pair, fm, _), outcome) in prepared.iter().zip(&outcomes) {
        let seg = decode_mask(&outcome.assignment, &fm.meta)?;
        let mask = a.out.join(format!("{}.pgm", pair.stem));
        let csv = a.out.join(format!("{}.loss.csv", pair.stem));
        let ckpt = a.out.join(format!("{}.ckpt", pair.stem));
        seg.pixel_mask.write_pgm(&mask)?;
        fs::write(&csv, loss_csv(&outcome.losses)).with_context(|| format!("writing {}", csv.display()))?;
        outcome.model.save_checkpoint(&ckpt)?;
        let final_loss = outcome.losses.last().copied().unwrap_or(f64::NAN);
        info!("{}: final loss {final_loss:.6}, foreground cluster {}", pair.stem, seg.fg_cluster);
        outputs.push(OutputRecord {
            stem: pair.stem.clone(),
            mask,
            loss_csv: csv,
            checkpoint: ckpt,
            fg_cluster: seg.fg_cluster,
            final_loss,
        });
    }

    let manifest = RunManifest {
        version: VERSION.to_string(),
        seed: model.seed,
        train,
        model,
        inputs,
        outputs,
        skipped,
    };
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(0)
}

fn stems_with(dir: &Path, exts: &[&str]) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        let Some(rank) = exts.iter().position(|e| *e == ext) else {
            continue;
        };
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        // a `.pgm` ground truth wins over an `.mgt` one with the same stem
        let replace = match out.get(stem) {
            None => true,
            Some(prev) => {
                let prev: &PathBuf = prev;
                let prev_ext = prev.extension().and_then(|e| e.to_str()).unwrap_or("");
                exts.iter().position(|e| *e == prev_ext).is_none_or(|p| rank < p)
            }
        };
        if replace {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ImageLine<'a> {
    path: &'a Path,
    iou: f64,
    dice: f64,
}

#[derive(Debug, Serialize)]
struct SummaryLine {
    summary: bool,
    images: usize,
    mean_iou: f64,
    mean_dice: f64,
    missing: Vec<String>,
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<u8> {
    let preds = stems_with(&a.input, &["pgm"])?;
    let gts = stems_with(&a.gt, &["pgm", "mgt"])?;
    let mut missing = Vec::new();
    for stem in preds.keys().filter(|s| !gts.contains_key(*s)) {
        eprintln!("warning: no ground truth for {stem}");
        missing.push(stem.clone());
    }
    for stem in gts.keys().filter(|s| !preds.contains_key(*s)) {
        eprintln!("warning: no prediction for {stem}");
        missing.push(stem.clone());
    }
    let mut results: Vec<MetricResult> = Vec::new();
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else { continue };
        let pred = BinaryMask::read_pgm(pred_path)?;
        let gt = BinaryMask::read_any(gt_path)?;
        let r = iou_dice(&pred, &gt).with_context(|| format!("scoring {stem}"))?;
        println!(
            "{}",
            serde_json::to_string(&ImageLine {
                path: pred_path,
                iou: r.iou,
                dice: r.dice
            })?
        );
        results.push(r);
    }
    if results.is_empty() {
        eprintln!("error: no prediction/ground-truth pairs share a basename");
        return Ok(1);
    }
    let s = dataset_report(&results)?;
    println!(
        "{}",
        serde_json::to_string(&SummaryLine {
            summary: true,
            images: s.images,
            mean_iou: s.mean_iou,
            mean_dice: s.mean_dice,
            missing,
        })?
    );
    Ok(0)
}

pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<u8> {
    let cfg = SynthConfig {
        nodes: a.nodes,
        blocks: a.blocks,
        noise: a.noise,
        dim: a.dim,
        seed: a.seed,
        patch: a.patch,
    };
    let planted = generate::<f64>(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = planted.write(&a.out, &a.stem)?;
    info!("wrote {}", path.display());
    Ok(0)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<u8> {
    let fault = a.inject_fault.then_some(Fault::NegateSiluBackward);
    let activation: Activation = a.activation.into();
    let mut worst = 0.0f64;
    let mut failed = None;
    for seed in 0..a.seeds {
        let (image, mcfg) = gradcheck_instance(seed, a.max_nodes, activation)?;
        let report = model_grad_check(&image, &mcfg, a.step, a.tol, fault)?;
        let err = report.max_error();
        println!(
            "seed {seed:>3}: n = {:>2}, k = {}, max relative error {err:.3e}",
            image.nodes(),
            mcfg.clusters
        );
        worst = worst.max(err);
        if !report.passed() && failed.is_none() {
            failed = Some((seed, report.worst().unwrap_or("?").to_string()));
        }
    }
    println!("max relative error {worst:.3e} (tol {:.1e})", a.tol);
    match failed {
        None => Ok(0),
        Some((seed, name)) => {
            eprintln!("gradient check failed: seed {seed}, parameter {name}");
            Ok(1)
        }
    }
}
