//! Subcommands behind the `gridedit` binary. Each resolves its
//! configuration (defaults, then `--config`, then flags), logs it, and
//! returns the path of its main artifact.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{apply, read_kv, render, KeyValue};
use crate::dataset::{build_default_dataset, DatasetConfig, Manifest, Split};
use crate::diffusion::SampleOptions;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_split, GridEditor, ModelEditor, SplitKind};
use crate::image_grid::{compose, mask_query, Image};
use crate::providers::{AdapterRegistry, Embedder, ProviderConfig, Providers};
use crate::trainer::{final_checkpoint_path, train, TrainConfig, TrainOutput};

#[derive(Debug, Parser)]
#[command(name = "gridedit", version, about = "Grid-prompted image editing with a small conditioned diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired-edit dataset and its manifest.
    Dataset(DatasetArgs),
    /// Train the conditioning branches on a manifest.
    Train(TrainArgs),
    /// Edit a query image from one example pair and an instruction.
    Edit(EditArgs),
    /// Score a checkpoint on a manifest split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub example_in: PathBuf,
    #[arg(long)]
    pub example_out: PathBuf,
    #[arg(long)]
    pub query_in: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the full generated grid here.
    #[arg(long)]
    pub save_grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub grey: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `in` or `ood`; `ood` requires the records' groups to be unseen in training.
    #[arg(long, default_value = "ood")]
    pub split: String,
    /// Which manifest records to evaluate: `test` or `train`.
    #[arg(long, default_value = "test")]
    pub records: String,
    /// Manifest the checkpoint was trained on (defaults to `--manifest`).
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, targets: &mut [&mut dyn KeyValue]) -> Result<()> {
    if let Some(p) = path {
        apply(&read_kv(p)?, targets)?;
    }
    Ok(())
}

fn log_resolved(command: &str, sources: &[&dyn KeyValue]) -> String {
    let text = render(sources);
    log::info!("{command}: resolved config\n{text}");
    text
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn providers(cfg: &ProviderConfig) -> Result<Providers> {
    Providers::from_config(cfg, &AdapterRegistry::new())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub groups: usize,
    pub pairs: usize,
    pub train_records: usize,
    pub test_records: usize,
}

pub fn cmd_dataset(args: &DatasetArgs) -> Result<DatasetSummary> {
    let mut cfg = DatasetConfig::default();
    let mut pcfg = ProviderConfig::default();
    load_config(args.config.as_deref(), &mut [&mut cfg, &mut pcfg])?;
    if let Some(g) = args.groups {
        cfg.groups = g;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.image_size {
        cfg.image_size = s;
    }
    let resolved = log_resolved("dataset", &[&cfg, &pcfg]);
    let p = providers(&pcfg)?;
    let m = build_default_dataset(&cfg, &args.out, &p)?;
    write_text(&args.out.join("resolved_config.txt"), &resolved)?;
    let summary = DatasetSummary {
        manifest: crate::dataset::manifest_path(&args.out),
        groups: m.groups.len(),
        pairs: m.groups.iter().map(|g| g.pairs.len()).sum(),
        train_records: m.records(Split::Train).len(),
        test_records: m.records(Split::Test).len(),
    };
    log::info!(
        "dataset: {} groups, {} pairs, {} train / {} test records",
        summary.groups,
        summary.pairs,
        summary.train_records,
        summary.test_records
    );
    Ok(summary)
}

/// Returns the final checkpoint path.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = TrainConfig::default();
    let mut pcfg = ProviderConfig::default();
    load_config(args.config.as_deref(), &mut [&mut cfg, &mut pcfg])?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let resolved = log_resolved("train", &[&cfg, &pcfg]);
    let manifest = Manifest::load(&args.manifest)?;
    let p = providers(&pcfg)?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_text(&args.out.join("resolved_config.txt"), &resolved)?;
    let emb: Arc<dyn Embedder> = Arc::clone(&p.embedder);
    let (state, report) = train(
        &manifest,
        &cfg,
        &emb,
        p.unifier.as_ref(),
        resume,
        Some(TrainOutput { dir: &args.out }),
    )?;
    if let Some(last) = report.steps.last() {
        log::info!("train: finished at step {} with total loss {:.5}", state.step, last.total);
    }
    Ok(final_checkpoint_path(&args.out))
}

fn sample_config(path: Option<&Path>) -> Result<(SampleOptions, ProviderConfig)> {
    let mut opts = SampleOptions::default();
    let mut pcfg = ProviderConfig::default();
    load_config(path, &mut [&mut opts, &mut pcfg])?;
    Ok((opts, pcfg))
}

/// Returns the path of the edited query image.
pub fn cmd_edit(args: &EditArgs) -> Result<PathBuf> {
    let (opts, pcfg) = sample_config(args.config.as_deref())?;
    log_resolved("edit", &[&opts, &pcfg]);
    log::info!("edit: seed = {}, grey = {}", args.seed, args.grey);
    let ck = Checkpoint::load(&args.checkpoint)?;
    let ex_in = Image::load_png(&args.example_in)?;
    let ex_out = Image::load_png(&args.example_out)?;
    let q_in = Image::load_png(&args.query_in)?;
    let grid = compose(&ex_in, &ex_out, &q_in, &Image::filled(q_in.height(), q_in.width(), q_in.channels(), 0.0))?;
    let cond = mask_query(&grid, args.grey)?;
    let p = providers(&pcfg)?;
    let editor = ModelEditor {
        model: &ck.model,
        embedder: p.embedder.as_ref(),
        unifier: p.unifier.as_ref(),
        options: opts,
    };
    let out = editor.edit(&cond, &args.instruction, args.seed)?;
    if let Some(g) = &args.save_grid {
        out.save_png(g)?;
    }
    out.quadrant(3).save_png(&args.out)?;
    Ok(args.out.clone())
}

/// Returns the path of the JSON report.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<PathBuf> {
    let (opts, pcfg) = sample_config(args.config.as_deref())?;
    let split: SplitKind = args.split.parse()?;
    let records = match args.records.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return Err(Error::Validation(format!("records must be test or train, got {other:?}"))),
    };
    log_resolved("evaluate", &[&opts, &pcfg]);
    log::info!("evaluate: split = {}, records = {}, seed = {}", args.split, args.records, args.seed);
    let manifest = Manifest::load(&args.manifest)?;
    let training: BTreeSet<String> = match &args.train_manifest {
        Some(p) => Manifest::load(p)?.group_ids(Split::Train),
        None => manifest.group_ids(Split::Train),
    };
    let ck = Checkpoint::load(&args.checkpoint)?;
    let p = providers(&pcfg)?;
    let editor = ModelEditor {
        model: &ck.model,
        embedder: p.embedder.as_ref(),
        unifier: p.unifier.as_ref(),
        options: opts,
    };
    let report = evaluate_split(&editor, &manifest, records, split, &training, p.embedder.as_ref(), args.seed)?;
    log::info!(
        "evaluate: {} records, directional similarity {:.4}, feature distance {:.4}",
        report.records.len(),
        report.directional_similarity,
        report.feature_distance
    );
    write_text(&args.out, &serde_json::to_string_pretty(&report)?)?;
    Ok(args.out.clone())
}

/// Dispatch a parsed command line; returns the artifact path to print.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Dataset(a) => cmd_dataset(&a).map(|s| s.manifest),
        Command::Train(a) => cmd_train(&a),
        Command::Edit(a) => cmd_edit(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}
