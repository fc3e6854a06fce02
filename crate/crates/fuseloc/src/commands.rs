//! Command-line surface: dataset generation, training, retrieval
//! evaluation, the dominating-modality diagnostic, and the gradient
//! checker, sharing one flat configuration space.
//!
//! Precedence: built-in defaults, then a `--config` file, then explicit
//! flags. Every command is deterministic for a fixed seed and precision;
//! `--threads` only bounds worker parallelism.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::ParamSet;
use crate::branches::FusedModel;
use crate::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_dataset, save_dataset, traversal_split, Element};
use crate::error::{Error, Result};
use crate::eval::{build_database, modality_diagnostic, ranking_dump, EvalReport, Modality};
use crate::metric::{train_with, TrainOptions};
use crate::opchecks::{run_suite, DEFAULT_EPSILON, SUITE_TOLERANCE};
use crate::pooling::PoolMethod;
use crate::scalar::{Precision, Scalar};
use crate::sparse::QuantizationConfig;

/// Multimodal place-recognition pipeline: synthetic data, descriptor
/// training, retrieval evaluation, and numeric self-checks.
#[derive(Debug, Parser)]
#[command(name = "fuseloc", version, disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset (clouds + images + index).
    GenData(GenDataArgs),
    /// Train fused descriptors with multi-head triplet loss.
    Train(TrainArgs),
    /// Evaluate retrieval: Recall@{1,5,10} and AR@1% on the held-out traversal.
    Eval(EvalArgs),
    /// Compare per-modality active-triplet counts on train vs validation data.
    Diagnose(DiagnoseArgs),
    /// Verify analytic gradients against central finite differences (64-bit).
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every command.
#[derive(Debug, Args)]
pub struct SharedArgs {
    /// Config file of `key = value` lines; explicit flags override it
    #[arg(long, value_name = "FILE", global = false)]
    pub config: Option<PathBuf>,
    /// Master RNG seed [default: 0]
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker-thread bound, 0 = automatic; never affects results [default: 0]
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Numeric precision: f32 or f64 [default: f32]
    #[arg(long, value_name = "P")]
    pub precision: Option<String>,
    /// Output directory [default: out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Number of distinct places [default: 40]
    #[arg(long, value_name = "N")]
    pub places: Option<usize>,
    /// Traversals per place; the last is held out [default: 4]
    #[arg(long, value_name = "N")]
    pub traversals: Option<usize>,
    /// Minimum distance between places, meters; must exceed the 50 m
    /// negative threshold [default: 100]
    #[arg(long, value_name = "M")]
    pub spacing: Option<f64>,
    /// Points per cloud [default: 1024]
    #[arg(long, value_name = "N")]
    pub points_per_cloud: Option<usize>,
    /// Square image side in pixels [default: 64]
    #[arg(long, value_name = "PX")]
    pub image_size: Option<usize>,
    /// Extra photometric image variants per element [default: 2]
    #[arg(long, value_name = "N")]
    pub image_variants: Option<usize>,
    /// Watermark training images with a place-keyed spurious cue
    #[arg(long)]
    pub spurious_rgb: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Dataset directory (from gen-data)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Point-cloud head loss weight [default: 0.5]
    #[arg(long, value_name = "X")]
    pub alpha: Option<f64>,
    /// Image head loss weight [default: 0]
    #[arg(long, value_name = "X")]
    pub beta: Option<f64>,
    /// Triplet margin [default: 0.2]
    #[arg(long, value_name = "M")]
    pub margin: Option<f64>,
    /// Training epochs [default: 50]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Checkpoint every N epochs, 0 = final only [default: 0]
    #[arg(long, value_name = "N")]
    pub save_every: Option<usize>,
    /// Main learning rate [default: 1e-3]
    #[arg(long, value_name = "LR")]
    pub lr_main: Option<f64>,
    /// Image-branch learning rate [default: 1e-4]
    #[arg(long, value_name = "LR")]
    pub lr_image: Option<f64>,
    /// L2 weight decay [default: 1e-3]
    #[arg(long, value_name = "WD")]
    pub weight_decay: Option<f64>,
    /// Descriptor width per branch [default: 128]
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Point-cloud pyramid widths, comma-separated [default: 32,32,64,64]
    #[arg(long, value_name = "A,B,C,D")]
    pub pc_channels: Option<String>,
    /// Image block widths, comma-separated [default: 32,64,128,256]
    #[arg(long, value_name = "A,B,C,D")]
    pub image_channels: Option<String>,
    /// Pooling: gem, mac or spoc [default: gem]
    #[arg(long, value_name = "POOL")]
    pub pool: Option<String>,
    /// Initial nominal batch size [default: 8]
    #[arg(long, value_name = "N")]
    pub batch_start: Option<usize>,
    /// Batch-size cap [default: 160]
    #[arg(long, value_name = "N")]
    pub batch_cap: Option<usize>,
    /// Voxel edge for cloud quantization [default: 0.01]
    #[arg(long, value_name = "S")]
    pub quantization_step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Trained checkpoint path
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset directory; the last traversal becomes the query set
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Descriptor to evaluate: fused, pc or rgb [default: fused]
    #[arg(long, value_name = "M")]
    pub modality: Option<String>,
    /// Also write the per-query ranking table for external cross-checks
    #[arg(long)]
    pub dump_ranking: bool,
    /// Expected descriptor width per branch; must match the checkpoint
    #[arg(long, value_name = "K")]
    pub k: Option<usize>,
    /// Expected pooling method; must match the checkpoint
    #[arg(long, value_name = "POOL")]
    pub pool: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Trained checkpoint path
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Training dataset directory (its database traversals are sampled)
    #[arg(long, value_name = "DIR")]
    pub train_data: PathBuf,
    /// Validation dataset directory (sampled in full; must contain
    /// positive pairs)
    #[arg(long, value_name = "DIR")]
    pub val_data: PathBuf,
    /// Elements per diagnostic batch [default: 16]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Check a single op (e.g. gem, sparse_conv) instead of the full suite
    #[arg(long, value_name = "OP")]
    pub op: Option<String>,
    /// Central-difference step [default: 1e-6]
    #[arg(long, value_name = "EPS")]
    pub eps: Option<f64>,
}

/// Execute a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Defaults, then the config file, then explicit shared flags. Also
/// resolves the output directory and bounds the worker pool.
fn resolve(shared: &SharedArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &shared.config {
        cfg.load_file(path)?;
    }
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = shared.threads {
        cfg.threads = threads;
    }
    if let Some(p) = &shared.precision {
        cfg.precision = Precision::parse(p).ok_or_else(|| {
            Error::validation(format!("precision must be f32 or f64, got {p:?}"))
        })?;
    }
    if cfg.threads > 0 {
        // First initialization wins; later commands in the same process
        // keep the existing pool, which never changes results anyway.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let out = shared.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn parse_channel_flag(flag: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::validation(format!(
            "--{flag} expects 4 comma-separated widths, got {value:?}"
        )));
    }
    let mut out = [0usize; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::validation(format!("--{flag}: cannot parse {part:?}")))?;
    }
    Ok(out)
}

fn parse_pool_flag(value: &str) -> Result<PoolMethod> {
    PoolMethod::parse(value)
        .ok_or_else(|| Error::validation(format!("pool must be gem, mac or spoc, got {value:?}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---- gen-data ----

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let (mut cfg, out) = resolve(&args.shared)?;
    cfg.generate.seed = cfg.seed;
    if let Some(v) = args.places {
        cfg.generate.n_places = v;
    }
    if let Some(v) = args.traversals {
        cfg.generate.traversals = v;
    }
    if let Some(v) = args.spacing {
        cfg.generate.spacing_m = v;
    }
    if let Some(v) = args.points_per_cloud {
        cfg.generate.points_per_cloud = v;
    }
    if let Some(v) = args.image_size {
        cfg.generate.image_size = v;
    }
    if let Some(v) = args.image_variants {
        cfg.generate.image_variants = v;
    }
    if args.spurious_rgb {
        cfg.generate.spurious_rgb = true;
    }

    let ds = generate_synthetic(&cfg.generate)?;
    save_dataset(&out, &ds.elements)?;
    println!(
        "wrote {} elements ({} places x {} traversals) to {}",
        ds.elements.len(),
        cfg.generate.n_places,
        cfg.generate.traversals,
        out.display()
    );
    if let Some(report) = &ds.spurious_report {
        println!(
            "spurious-cue self-check: train_images={} holdout_images={} \
             min_train_diff={:.6} max_holdout_diff={:.6} pass={}",
            report.train_images,
            report.holdout_images,
            report.min_train_diff,
            report.max_holdout_diff,
            report.passes()
        );
        if !report.passes() {
            return Err(Error::numeric("spurious-cue generator self-check failed"));
        }
    }
    Ok(())
}

// ---- train ----

fn apply_train_flags(cfg: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = args.margin {
        cfg.loss.margin = v;
    }
    if let Some(v) = args.epochs {
        cfg.optimizer.epochs = v;
        // Keep the default schedule valid for short runs: the built-in
        // drop epoch only makes sense inside the horizon.
        if cfg.optimizer.lr_drop_epoch > v {
            cfg.optimizer.lr_drop_epoch = v;
        }
    }
    if let Some(v) = args.save_every {
        cfg.save_every = v;
    }
    if let Some(v) = args.lr_main {
        cfg.optimizer.lr_main = v;
    }
    if let Some(v) = args.lr_image {
        cfg.optimizer.lr_image_branch = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.optimizer.weight_decay = v;
    }
    if let Some(v) = args.k {
        cfg.model.k = v;
    }
    if let Some(v) = &args.pc_channels {
        cfg.model.pc_channels = parse_channel_flag("pc-channels", v)?;
    }
    if let Some(v) = &args.image_channels {
        cfg.model.image_channels = parse_channel_flag("image-channels", v)?;
    }
    if let Some(v) = &args.pool {
        cfg.model.pool = parse_pool_flag(v)?;
    }
    if let Some(v) = args.batch_start {
        cfg.controller.current_size = v;
    }
    if let Some(v) = args.batch_cap {
        cfg.controller.max_size = v;
    }
    if let Some(v) = args.quantization_step {
        cfg.model.quantization_step = v;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (mut cfg, out) = resolve(&args.shared)?;
    apply_train_flags(&mut cfg, args)?;
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, args, &out),
        Precision::F64 => run_train::<f64>(&cfg, args, &out),
    }
}

fn run_train<F: Scalar>(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let elements = load_dataset(&args.data)?;
    let (train_idx, held_idx) = traversal_split(&elements);
    let train_set: Vec<Element> = train_idx.iter().map(|&i| elements[i].clone()).collect();

    let mut params: ParamSet<F> = ParamSet::new();
    let model = FusedModel::new(&mut params, cfg.model.clone(), cfg.seed)?;
    let header =
        CheckpointHeader { precision: cfg.precision.name().to_string(), model: cfg.model.clone() };
    let opts = TrainOptions {
        loss: cfg.loss,
        optimizer: cfg.optimizer.clone(),
        controller: cfg.controller.clone(),
        augment: cfg.augment,
        quantization: QuantizationConfig { step: cfg.model.quantization_step },
        batch_retries: cfg.batch_retries,
    };

    std::fs::create_dir_all(out)?;
    let periodic = |epoch: usize| out.join(format!("checkpoint_ep{epoch:04}.flc"));
    if cfg.save_every > 0 {
        // An initial snapshot guarantees a "last good checkpoint" even if
        // training diverges during the first epoch.
        save_checkpoint(&periodic(0), &header, &params)?;
    }

    let save_every = cfg.save_every;
    let outcome =
        train_with(&model, &mut params, &train_set, &opts, cfg.seed, |epoch, ps| {
            if save_every > 0 && epoch % save_every == 0 {
                save_checkpoint(&periodic(epoch), &header, ps)?;
            }
            Ok(())
        })?;

    save_checkpoint(&out.join("checkpoint.flc"), &header, &params)?;
    write_text(&out.join("train.log"), &outcome.log)?;

    let last = outcome.epochs.last();
    println!(
        "trained {} epochs on {} elements ({} held out); final mean fused loss {:.6}",
        outcome.epochs.len(),
        train_set.len(),
        held_idx.len(),
        last.map_or(f64::NAN, |e| e.mean_fused_loss)
    );
    println!("checkpoint: {}", out.join("checkpoint.flc").display());
    println!("log: {}", out.join("train.log").display());
    Ok(())
}

// ---- eval ----

/// Model configuration for a checkpoint-consuming command: the header is
/// the source of truth, and any explicitly passed architecture flag must
/// agree with it.
fn model_from_header(
    header: &CheckpointHeader,
    k: Option<usize>,
    pool: Option<&str>,
) -> Result<crate::branches::ModelConfig> {
    let mut model = header.model.clone();
    if let Some(v) = k {
        model.k = v;
    }
    if let Some(v) = pool {
        model.pool = parse_pool_flag(v)?;
    }
    if model != header.model {
        return Err(Error::mismatch(format!(
            "checkpoint was built with k={} pool={}, flags request k={} pool={}",
            header.model.k,
            header.model.pool.name(),
            model.k,
            model.pool.name()
        )));
    }
    Ok(model)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (cfg, out) = resolve(&args.shared)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(&cfg, args, &out),
        Precision::F64 => run_eval::<f64>(&cfg, args, &out),
    }
}

fn run_eval<F: Scalar>(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<()> {
    let modality = match &args.modality {
        None => Modality::Fused,
        Some(m) => Modality::parse(m).ok_or_else(|| {
            Error::validation(format!("modality must be fused, pc or rgb, got {m:?}"))
        })?,
    };
    let (header, _) = read_checkpoint(&args.checkpoint)?;
    let model_cfg = model_from_header(&header, args.k, args.pool.as_deref())?;

    let mut params: ParamSet<F> = ParamSet::new();
    let model = FusedModel::new(&mut params, model_cfg, cfg.seed)?;
    load_checkpoint(&args.checkpoint, &mut params)?;

    let elements = load_dataset(&args.data)?;
    let (db_idx, query_idx) = traversal_split(&elements);
    if query_idx.is_empty() {
        return Err(Error::validation(
            "dataset has a single traversal; no held-out queries to evaluate",
        ));
    }
    let db_elements: Vec<Element> = db_idx.iter().map(|&i| elements[i].clone()).collect();
    let query_elements: Vec<Element> = query_idx.iter().map(|&i| elements[i].clone()).collect();

    let db = build_database(&model, &params, &db_elements, modality)?;
    let queries = build_database(&model, &params, &query_elements, modality)?;
    let report = EvalReport::compute(&db, queries.entries(), modality)?;

    let text = report.to_tsv(None);
    std::fs::create_dir_all(out)?;
    write_text(&out.join("eval_report.tsv"), &text)?;
    print!("{text}");
    if args.dump_ranking {
        let dump = ranking_dump(&db, queries.entries())?;
        write_text(&out.join("ranking.tsv"), &dump)?;
        println!("ranking dump: {}", out.join("ranking.tsv").display());
    }
    Ok(())
}

// ---- diagnose ----

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let (cfg, out) = resolve(&args.shared)?;
    match cfg.precision {
        Precision::F32 => run_diagnose::<f32>(&cfg, args, &out),
        Precision::F64 => run_diagnose::<f64>(&cfg, args, &out),
    }
}

fn run_diagnose<F: Scalar>(cfg: &RunConfig, args: &DiagnoseArgs, out: &Path) -> Result<()> {
    let (header, _) = read_checkpoint(&args.checkpoint)?;
    let mut params: ParamSet<F> = ParamSet::new();
    let model = FusedModel::new(&mut params, header.model.clone(), cfg.seed)?;
    load_checkpoint(&args.checkpoint, &mut params)?;

    let train_all = load_dataset(&args.train_data)?;
    let (train_idx, _) = traversal_split(&train_all);
    let train_set: Vec<Element> = train_idx.iter().map(|&i| train_all[i].clone()).collect();
    let val_set = load_dataset(&args.val_data)?;

    let batch_size = args.batch_size.unwrap_or(16);
    let report = modality_diagnostic(
        &model,
        &params,
        &train_set,
        &val_set,
        &cfg.loss,
        batch_size,
        cfg.seed,
    )?;
    let block = report.to_block();
    std::fs::create_dir_all(out)?;
    write_text(&out.join("diagnostic.txt"), &block)?;
    print!("{block}");
    Ok(())
}

// ---- gradcheck ----

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let eps = args.eps.unwrap_or(DEFAULT_EPSILON);
    let results = run_suite(args.op.as_deref(), eps, SUITE_TOLERANCE)?;
    println!("{:<18} {:>7} {:>13} {:>7}", "op", "checks", "max_rel_err", "status");
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<18} {:>7} {:>13.3e} {:>7}",
            r.name,
            r.checks,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} ops within {:.0e} relative error", results.len(), SUITE_TOLERANCE);
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "{} of {} ops exceeded {:.0e} relative error at step {eps:e}: {}",
            failed.len(),
            results.len(),
            SUITE_TOLERANCE,
            failed.join(", ")
        )))
    }
}

