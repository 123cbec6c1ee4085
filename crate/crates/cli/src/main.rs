use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scvd_autograd::Scalar;
use scvd_core::corpus::{class_histogram, load_manifest, CorpusError};
use scvd_core::embedding::ProviderKind;
use scvd_core::model::{ModelError, Variant};
use scvd_core::pipeline::{self, Dtype, PipelineConfig, PipelineError};
use scvd_core::solidity_prep::clean_source;
use scvd_core::train_eval::{CellResult, TrainError};
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Multimodal smart-contract vulnerability detection pipeline.
#[derive(Parser, Debug)]
#[command(name = "scvd", version)]
struct Cli {
    /// TOML pipeline configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for features, caches, models and reports.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// JSONL corpus manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Sets the split, training and initialization seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Embedding provider: local or remote.
    #[arg(long, global = true, value_parser = parse_provider)]
    provider: Option<ProviderKind>,
    /// Feature workers (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Scalar type: f32 or f64.
    #[arg(long, global = true, value_parser = parse_dtype)]
    dtype: Option<Dtype>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the manifest and summarize the corpus.
    Ingest,
    /// Write comment-free, whitespace-normalized copies beside .sol files.
    Clean {
        /// Files or directories (searched recursively).
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Materialize features for every manifest record.
    Features {
        /// Largest tolerated fraction of failed records.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train one variant and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the variant × epoch grid.
    Ablation {
        /// Comma-separated variants (BERT, BiLSTM, GNN, M1, M2, M3, VulnSense).
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Option<Vec<Variant>>,
        /// Comma-separated epoch budgets.
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
    },
    /// Classify one contract.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        contract: PathBuf,
        /// Runtime bytecode to use instead of compiling the source.
        #[arg(long)]
        bytecode: Option<String>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Overrides the configured variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        _ => Err(format!("unknown dtype {s:?} (expected f32 or f64)")),
    }
}

enum Failure {
    Usage(String),
    Partial(String),
    Internal(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::Model(ModelError::Config(_))
            | PipelineError::Train(TrainError::Hyper(_))
            | PipelineError::Corpus(CorpusError::MalformedManifest { .. }) => {
                Failure::Usage(e.to_string())
            }
            PipelineError::ThresholdExceeded { .. } => Failure::Partial(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        PipelineError::from(e).into()
    }
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_toml_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = &cli.workspace {
        config.workspace = w.clone();
    }
    if let Some(m) = &cli.manifest {
        config.manifest = m.clone();
    }
    if let Some(s) = cli.seed {
        config.set_seed(s);
    }
    if let Some(p) = cli.provider {
        config.embedding.provider = p;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(d) = cli.dtype {
        config.dtype = d;
    }
    match &cli.command {
        Command::Features { threshold: Some(t) } => config.failure_threshold = *t,
        Command::Train(args) => {
            if let Some(v) = args.variant {
                config.model.variant = v;
            }
            if let Some(e) = args.epochs {
                config.training.epochs = e;
            }
        }
        Command::Ablation { variants, epochs } => {
            if let Some(v) = variants {
                config.ablation.variants = v.clone();
            }
            if let Some(e) = epochs {
                config.ablation.epochs = e.clone();
            }
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn emit(json_mode: bool, value: serde_json::Value, text: impl FnOnce() -> String) {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    } else {
        println!("{}", text());
    }
}

fn sol_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Failure::Usage(format!("{}: no such file or directory", p.display())));
        }
        for entry in walkdir::WalkDir::new(p).sort_by_file_name() {
            let entry = entry.map_err(|e| Failure::Internal(e.to_string()))?;
            let path = entry.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if entry.file_type().is_file() && name.ends_with(".sol") && !name.ends_with(".clean.sol") {
                out.push(path.to_path_buf());
            }
        }
    }
    Ok(out)
}

fn clean_paths(cli: &Cli, config: &PipelineConfig, paths: &[PathBuf]) -> Result<(), Failure> {
    let mut written = Vec::new();
    for path in sol_files(paths)? {
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
        let cleaned = clean_source(&text, config.clean);
        let target = path.with_extension("clean.sol");
        std::fs::write(&target, &cleaned.text).map_err(|e| Failure::Internal(format!("{}: {e}", target.display())))?;
        written.push(json!({
            "source": path, "cleaned": target,
            "original_len": cleaned.original_len, "cleaned_len": cleaned.cleaned_len,
        }));
    }
    let n = written.len();
    emit(cli.json, json!(written), || format!("cleaned {n} files"));
    Ok(())
}

fn ingest(cli: &Cli, config: &PipelineConfig) -> Result<(), Failure> {
    let records = load_manifest(&config.manifest)?;
    let hist = class_histogram(&records);
    let with_bytecode = records.iter().filter(|r| r.bytecode.is_some()).count();
    let missing: Vec<&str> =
        records.iter().filter(|r| !r.source_path.is_file()).map(|r| r.id.as_str()).collect();
    let summary = json!({
        "manifest": config.manifest,
        "records": records.len(),
        "class_histogram": hist,
        "with_bytecode": with_bytecode,
        "missing_sources": missing,
        "config_hash": config.hash(),
    });
    let path = config.workspace.join("ingest.json");
    std::fs::create_dir_all(&config.workspace)
        .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializable")))
        .map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
    emit(cli.json, summary, || {
        let mut s = format!("{} records ({} with bytecode)\n", records.len(), with_bytecode);
        for (label, n) in &hist {
            s += &format!("  {label:<11} {n}\n");
        }
        if !missing.is_empty() {
            s += &format!("missing sources: {}\n", missing.join(", "));
        }
        s.trim_end().to_string()
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{} manifest entries point at missing files", missing.len())))
    }
}

fn features(cli: &Cli, config: &PipelineConfig) -> Result<(), Failure> {
    let records = load_manifest(&config.manifest)?;
    let report = pipeline::materialize(config, &records)?;
    emit(cli.json, serde_json::to_value(&report).expect("serializable"), || {
        let mut s = format!(
            "{} records: {} computed, {} unchanged, {} failed; vocabulary {} tokens; {:.1}s",
            report.total,
            report.computed,
            report.skipped,
            report.failed.len(),
            report.vocab_size,
            report.seconds
        );
        for f in &report.failed {
            s += &format!("\n  {} [{}] {}", f.id, f.stage, f.error);
        }
        s
    });
    if report.failure_fraction() > config.failure_threshold {
        return Err(PipelineError::ThresholdExceeded {
            failed: report.failed.len(),
            total: report.total,
            threshold: config.failure_threshold,
        }
        .into());
    }
    Ok(())
}

fn train<T: Scalar>(cli: &Cli, config: &PipelineConfig) -> Result<(), Failure> {
    let summary = pipeline::train::<T>(config)?;
    emit(cli.json, serde_json::to_value(&summary).expect("serializable"), || {
        let last = summary.history.last();
        format!(
            "{} trained for {} epochs ({} steps, {:.1}s) on {} records\nfinal loss {} accuracy {}\ncheckpoint {}",
            summary.variant,
            summary.epochs,
            summary.steps,
            summary.train_seconds,
            summary.train_size,
            last.map_or("-".into(), |h| format!("{:.4}", h.loss)),
            last.map_or("-".into(), |h| format!("{:.4}", h.accuracy)),
            summary.checkpoint.display()
        )
    });
    Ok(())
}

fn eval<T: Scalar>(cli: &Cli, config: &PipelineConfig, checkpoint: &Path) -> Result<(), Failure> {
    let (report, path) = pipeline::evaluate_checkpoint::<T>(config, checkpoint)?;
    emit(cli.json, serde_json::to_value(&report).expect("serializable"), || {
        let mut s = format!(
            "{} E{}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} ({} test records)\n",
            report.variant, report.epochs, report.accuracy, report.precision, report.recall, report.f1, report.test_size
        );
        for row in report.confusion.0 {
            s += &format!("  {row:?}\n");
        }
        s + &format!("report {}", path.display())
    });
    Ok(())
}

fn ablation<T: Scalar>(cli: &Cli, config: &PipelineConfig) -> Result<(), Failure> {
    let quiet = cli.json;
    let summary = pipeline::ablation::<T>(config, |cell| {
        if !quiet {
            match &cell.result {
                CellResult::Ok { report, .. } => eprintln!(
                    "{} E{}: accuracy {:.4} f1 {:.4} ({:.1}s)",
                    cell.variant, cell.epochs, report.accuracy, report.f1, report.train_seconds
                ),
                CellResult::Failed { error } => eprintln!("{} E{}: failed: {error}", cell.variant, cell.epochs),
            }
        }
    })?;
    let failed = summary.cells.iter().filter(|c| c.report().is_none()).count();
    let table = std::fs::read_to_string(&summary.files.table).unwrap_or_default();
    emit(
        cli.json,
        json!({
            "cells": summary.cells,
            "reports": summary.files.cell_reports,
            "csv": summary.files.csv,
            "table": summary.files.table,
            "charts": summary.files.charts,
            "provenance": summary.provenance,
            "config_hash": config.hash(),
        }),
        || format!("{table}\nreports in {}", config.reports_dir().display()),
    );
    let total = summary.cells.len();
    if total > 0 && failed as f64 / total as f64 > config.failure_threshold {
        return Err(Failure::Partial(format!("{failed} of {total} ablation cells failed")));
    }
    Ok(())
}

fn predict<T: Scalar>(
    cli: &Cli,
    config: &PipelineConfig,
    checkpoint: &Path,
    contract: &Path,
    bytecode: Option<&str>,
) -> Result<(), Failure> {
    let p = pipeline::predict::<T>(config, checkpoint, contract, bytecode)?;
    emit(cli.json, serde_json::to_value(&p).expect("serializable"), || {
        let mut s = format!("{}\n", p.label);
        for (label, prob) in &p.probabilities {
            s += &format!("  {label:<11} {prob:.4}\n");
        }
        s.trim_end().to_string()
    });
    Ok(())
}

fn dispatch<T: Scalar>(cli: &Cli, config: &PipelineConfig) -> Result<(), Failure> {
    match &cli.command {
        Command::Ingest => ingest(cli, config),
        Command::Clean { paths } => clean_paths(cli, config, paths),
        Command::Features { .. } => features(cli, config),
        Command::Train(_) => train::<T>(cli, config),
        Command::Eval { checkpoint } => eval::<T>(cli, config, checkpoint),
        Command::Ablation { .. } => ablation::<T>(cli, config),
        Command::Predict { checkpoint, contract, bytecode } => {
            predict::<T>(cli, config, checkpoint, contract, bytecode.as_deref())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = resolve_config(cli)?;
    match config.dtype {
        Dtype::F32 => dispatch::<f32>(cli, &config),
        Dtype::F64 => dispatch::<f64>(cli, &config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
