mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medn_core::data_model::{
    generate_synthetic, hard_sample_audit, loso_splits, read_tensor, Dataset, DatasetManifest,
    MANIFEST_FILE,
};
use medn_core::evaluation::{export_features, run_loso, write_features_csv, LosoOptions};
use medn_core::preprocess::{preprocess_batch, FrameSequence, HornSchunck};
use medn_core::training::{
    ablate, save_metrics, train_on, write_ablation_csv, AblationGrid, Checkpoint,
};
use medn_core::MednError;
use serde_json::json;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config files or overrides (exit code 2).
    Config(String),
    OutputExists(PathBuf),
    Core(MednError),
    Io(std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "InvalidConfig",
            CliError::OutputExists(_) => "OutputExists",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "Io",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(MednError::InvalidConfig(_) | MednError::IndivisibleGrid { .. }) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::OutputExists(p) => write!(
                f,
                "{} already exists; pass --overwrite to replace it",
                p.display()
            ),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<MednError> for CliError {
    fn from(e: MednError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "medn",
    version,
    about = "Micro-expression recognition with motion-emotion decoupling"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.sevit.rates=[1,2,4,8]`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds or preprocessing workers run concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic hard-sample dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        hard_proportion: Option<f64>,
    },
    /// Turn a manifest of frame tensors into a flow dataset.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// The input tensors are already flow; validate and copy them.
        #[arg(long)]
        precomputed_flow: bool,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train on this LOSO fold's training subjects; default is every sample.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Leave-one-subject-out evaluation.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Retrain folds even when their checkpoints exist.
        #[arg(long)]
        retrain: bool,
    },
    /// Run an ablation grid under LOSO.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// components (alias tableIV), sparsity, backbone, lambda_au, lambda_orth
        #[arg(long)]
        grid: String,
    },
    /// Dump decoupled and fused features of every sample.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Config(e.to_string())),
    };
    match run(cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
    ExitCode::from(e.exit_code())
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

/// Refuses to touch an existing non-empty output unless `overwrite` is set,
/// in which case the old output is removed first.
fn claim_output(path: &Path, overwrite: bool) -> CliResult<()> {
    let occupied = match fs::metadata(path) {
        Ok(m) if m.is_dir() => fs::read_dir(path)?.next().is_some(),
        Ok(_) => true,
        Err(_) => false,
    };
    if occupied {
        if !overwrite {
            return Err(CliError::OutputExists(path.to_path_buf()));
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        } else {
            fs::remove_file(path)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let cfg = load_config(&cli.common)?;
    let overwrite = cli.common.overwrite;
    let data_or_root = |d: Option<PathBuf>| d.unwrap_or_else(|| cfg.data_root());
    match cli.command {
        Command::Synth {
            out,
            hard_proportion,
        } => {
            let mut synth = cfg.synth.clone();
            if let Some(p) = hard_proportion {
                synth.hard_proportion = p;
            }
            let out = data_or_root(out);
            let dataset = generate_synthetic(&synth, cfg.seed)?;
            claim_output(&out, overwrite)?;
            dataset.write(&out)?;
            let audit = hard_sample_audit(&dataset.manifest)?;
            Ok(json!({
                "dataset": out,
                "samples": dataset.len(),
                "subjects": loso_splits(&dataset.manifest)?.len(),
                "hard_count": audit.hard_count,
                "hard_proportion": audit.proportion,
            }))
        }
        Command::Preprocess {
            input,
            out,
            precomputed_flow,
        } => preprocess(&input, &out, precomputed_flow, cfg.jobs, overwrite),
        Command::Train { data, out, fold } => {
            let dataset = Dataset::load(&data_or_root(data))?;
            cfg.model.validate(&dataset.manifest.dims)?;
            let indices = match fold {
                Some(k) => {
                    let folds = loso_splits(&dataset.manifest)?;
                    folds
                        .get(k)
                        .ok_or_else(|| {
                            CliError::Config(format!(
                                "fold {k} does not exist ({} folds)",
                                folds.len()
                            ))
                        })?
                        .train
                        .clone()
                }
                None => (0..dataset.len()).collect(),
            };
            claim_output(&out, overwrite)?;
            fs::create_dir_all(&out)?;
            let outcome = train_on(&dataset, &indices, &cfg.model, cfg.seed, None)?;
            let ckpt = out.join("model.ckpt");
            outcome.checkpoint.save(&ckpt)?;
            save_metrics(&out.join("metrics.csv"), &outcome.metrics)?;
            let last = outcome.metrics.last();
            Ok(json!({
                "checkpoint": ckpt,
                "train_samples": indices.len(),
                "epochs": outcome.metrics.len(),
                "final": last,
            }))
        }
        Command::Eval { data, out, retrain } => {
            let dataset = Dataset::load(&data_or_root(data))?;
            cfg.model.validate(&dataset.manifest.dims)?;
            let report_path = out.join("report.json");
            if report_path.exists() && !overwrite {
                return Err(CliError::OutputExists(report_path));
            }
            fs::create_dir_all(&out)?;
            let opts = LosoOptions {
                jobs: cfg.jobs,
                checkpoint_dir: Some(out.join("checkpoints")),
                reuse_checkpoints: !retrain,
                ..LosoOptions::default()
            };
            let report = run_loso(&dataset, &cfg.model, cfg.seed, &opts)?;
            report.write_json(&report_path)?;
            report.write_predictions_csv(BufWriter::new(File::create(
                out.join("predictions.csv"),
            )?))?;
            report.write_confusion_csv(BufWriter::new(File::create(out.join("confusion.csv"))?))?;
            Ok(json!({
                "report": report_path,
                "uf1": report.uf1,
                "uar": report.uar,
                "hard_uf1": report.hard.uf1,
                "folds": report.folds.len(),
            }))
        }
        Command::Ablate { data, out, grid } => {
            let grid: AblationGrid = grid
                .parse()
                .map_err(|e: MednError| CliError::Config(e.to_string()))?;
            let dataset = Dataset::load(&data_or_root(data))?;
            claim_output(&out, overwrite)?;
            fs::create_dir_all(&out)?;
            let opts = LosoOptions {
                jobs: cfg.jobs,
                ..LosoOptions::default()
            };
            let rows = ablate(&dataset, &cfg.model, grid, cfg.seed, &opts);
            let csv_path = out.join("ablation.csv");
            write_ablation_csv(BufWriter::new(File::create(&csv_path)?), &rows)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            Ok(json!({ "csv": csv_path, "cells": rows.len(), "failed_cells": failed }))
        }
        Command::Export {
            checkpoint,
            data,
            out,
        } => {
            let dataset = Dataset::load(&data_or_root(data))?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let rows = export_features(&ckpt, &dataset, None)?;
            claim_output(&out, overwrite)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_features_csv(BufWriter::new(File::create(&out)?), &rows)?;
            Ok(json!({ "features": out, "rows": rows.len(), "dim": ckpt.config.feature_dim }))
        }
    }
}

fn preprocess(
    input: &Path,
    out: &Path,
    precomputed: bool,
    jobs: usize,
    overwrite: bool,
) -> CliResult<serde_json::Value> {
    let dataset = if precomputed {
        Dataset::load(input)?
    } else {
        let manifest_file = if input.is_dir() {
            input.join(MANIFEST_FILE)
        } else {
            input.to_path_buf()
        };
        let manifest = DatasetManifest::read(&manifest_file)?;
        let root = manifest_file
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let frames = manifest
            .records
            .iter()
            .map(|r| FrameSequence::new(read_tensor(&root.join(&r.path))?))
            .collect::<medn_core::Result<Vec<_>>>()?;
        let estimator = HornSchunck::default();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        let flows = pool.install(|| preprocess_batch(&frames, &estimator, &manifest.dims));
        let flows = flows
            .into_iter()
            .zip(&manifest.records)
            .map(|(f, r)| {
                f.map(|f| f.into_tensor()).map_err(|e| MednError::Format {
                    path: r.path.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<medn_core::Result<Vec<_>>>()?;
        Dataset::from_parts(manifest, flows)?
    };
    claim_output(out, overwrite)?;
    dataset.write(out)?;
    Ok(json!({ "dataset": out, "samples": dataset.len(), "precomputed_flow": precomputed }))
}
