use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use scvd_autograd::Scalar;
use serde::{Deserialize, Serialize};

use super::features::{derive_features, load_examples, make_provider};
use super::{read_json, write_json, PipelineConfig, PipelineError, Result};
use crate::corpus::{class_histogram, load_manifest, stratified_split, ContractRecord, DatasetSplit, Label};
use crate::evm::{tokenize_and_pad, SolidityCompiler, Vocab};
use crate::model::{FeatureKind, Model, ModelInput, ModelVariantConfig, Variant};
use crate::solidity_prep::clean_source;
use crate::train_eval::{
    self, run_ablation, write_reports, AblationCell, AblationPlan, EpochStats, EvaluationReport, Example, ReportFiles,
};

const CHECKPOINT_META: &str = "checkpoint.json";
const CHECKPOINT_VOCAB: &str = "vocab.json";
const CHECKPOINT_CONFIG: &str = "pipeline.toml";
const CHECKPOINT_HISTORY: &str = "history.json";

/// What a checkpoint directory records besides the model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: Variant,
    pub epochs: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub config_hash: String,
    pub train_size: usize,
}

impl Checkpoint {
    pub fn dir_name(variant: Variant, epochs: usize, seed: u64) -> String {
        format!("{}_e{epochs}_s{seed}", variant.as_str().to_ascii_lowercase())
    }

    pub fn read(dir: &Path) -> Result<(Checkpoint, PipelineConfig, Vocab)> {
        let meta_path = dir.join(CHECKPOINT_META);
        if !meta_path.is_file() {
            return Err(crate::model::ModelError::CheckpointMismatch {
                path: dir.display().to_string(),
                reason: format!("{CHECKPOINT_META} not found"),
            }
            .into());
        }
        let meta: Checkpoint = read_json(&meta_path)?;
        let config = PipelineConfig::from_toml_file(&dir.join(CHECKPOINT_CONFIG))?;
        let mut vocab: Vocab = read_json(&dir.join(CHECKPOINT_VOCAB))?;
        vocab.reindex();
        Ok((meta, config, vocab))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub variant: Variant,
    pub epochs: usize,
    pub steps: usize,
    pub train_size: usize,
    pub train_seconds: f64,
    pub history: Vec<EpochStats>,
    /// Training records left out because their features are missing.
    pub skipped: Vec<String>,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub cells: Vec<AblationCell>,
    pub files: ReportFiles,
    pub provenance: PathBuf,
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub probabilities: BTreeMap<Label, f64>,
    pub config_hash: String,
}

struct Data<T> {
    records: Vec<ContractRecord>,
    split: DatasetSplit,
    vocab: Vocab,
    train: Vec<Example<T>>,
    test: Vec<Example<T>>,
    skipped: Vec<String>,
}

/// Loads the manifest and the materialized features of both splits. The
/// split on disk must be the one the configuration produces.
fn load_data<T: Scalar>(config: &PipelineConfig) -> Result<Data<T>> {
    config.validate()?;
    let records = load_manifest(&config.manifest)?;
    let store = config.store();
    let split = stratified_split(&records, config.split.test_fraction, config.split.seed)?;
    let stored = store.load_split()?;
    if stored != split {
        return Err(PipelineError::Config(format!(
            "features were materialized with split seed {} and test fraction {}; rerun the features command",
            stored.seed, stored.test_fraction
        )));
    }
    let vocab = store.load_vocab()?;
    let labels: HashMap<String, Label> = records.iter().map(|r| (r.id.clone(), r.label)).collect();
    let (train, mut skipped) = load_examples::<T>(&store, &split.train, &labels)?;
    let (test, missing) = load_examples::<T>(&store, &split.test, &labels)?;
    skipped.extend(missing);
    Ok(Data { records, split, vocab, train, test, skipped })
}

fn model_config(config: &PipelineConfig, variant: Variant, vocab: &Vocab) -> ModelVariantConfig {
    ModelVariantConfig { variant, opcode_vocab_rows: vocab.table_rows(), ..config.model.clone() }
}

/// Trains `config.model.variant` for `config.training.epochs` and writes a
/// checkpoint under the workspace.
pub fn train<T: Scalar>(config: &PipelineConfig) -> Result<TrainSummary> {
    let data = load_data::<T>(config)?;
    let variant = config.model.variant;
    let model = crate::model::assemble_variant::<T>(&model_config(config, variant, &data.vocab))?;
    let outcome = train_eval::train(model, &data.train, &config.training)?;
    let epochs = config.training.epochs;
    let dir = config.models_dir().join(Checkpoint::dir_name(variant, epochs, config.training.seed));
    outcome.model.save(&dir)?;
    let meta = Checkpoint {
        variant,
        epochs,
        seed: config.training.seed,
        split_seed: config.split.seed,
        config_hash: config.hash(),
        train_size: data.train.len(),
    };
    write_json(&dir.join(CHECKPOINT_META), &meta)?;
    write_json(&dir.join(CHECKPOINT_VOCAB), &data.vocab)?;
    write_json(&dir.join(CHECKPOINT_HISTORY), &outcome.history)?;
    let toml_path = dir.join(CHECKPOINT_CONFIG);
    std::fs::write(&toml_path, config.to_toml()).map_err(PipelineError::io(toml_path))?;
    Ok(TrainSummary {
        checkpoint: dir,
        variant,
        epochs,
        steps: outcome.steps,
        train_size: data.train.len(),
        train_seconds: outcome.train_seconds,
        history: outcome.history,
        skipped: data.skipped,
        config_hash: meta.config_hash,
    })
}

/// Scores a checkpoint on the test split of the current feature store and
/// writes the report next to the ablation reports.
pub fn evaluate_checkpoint<T: Scalar>(config: &PipelineConfig, checkpoint: &Path) -> Result<(EvaluationReport, PathBuf)> {
    let (meta, _, vocab) = Checkpoint::read(checkpoint)?;
    let data = load_data::<T>(config)?;
    if vocab != data.vocab {
        return Err(crate::model::ModelError::CheckpointMismatch {
            path: checkpoint.display().to_string(),
            reason: "opcode vocabulary differs from the feature store's".into(),
        }
        .into());
    }
    let model = Model::<T>::load(checkpoint)?;
    let mut report = train_eval::evaluate(&model, &data.test, config.ablation.averaging)?;
    report.epochs = meta.epochs;
    report.split_seed = Some(config.split.seed);
    report.train_seed = Some(meta.seed);
    report.config_hash = Some(meta.config_hash.clone());
    let path = config.reports_dir().join(format!(
        "eval_{}_e{}_s{}.json",
        meta.variant.as_str().to_ascii_lowercase(),
        meta.epochs,
        config.split.seed
    ));
    write_json(&path, &report)?;
    Ok((report, path))
}

#[derive(Serialize)]
struct Provenance<'a> {
    config_hash: String,
    split_seed: u64,
    train_seed: u64,
    init_seed: u64,
    test_fraction: f64,
    class_histogram: BTreeMap<Label, usize>,
    train_size: usize,
    test_size: usize,
    skipped: &'a [String],
    bytecode_origins: BTreeSet<String>,
    embedding: &'a super::EmbeddingSettings,
    variants: &'a [Variant],
    epochs: &'a [usize],
}

/// Runs the configured variant × epoch grid on one fixed split and writes
/// per-cell reports, the CSV, the table, charts and a provenance file.
pub fn ablation<T: Scalar>(config: &PipelineConfig, on_cell: impl FnMut(&AblationCell)) -> Result<AblationSummary> {
    let data = load_data::<T>(config)?;
    let plan = AblationPlan {
        variants: config.ablation.variants.clone(),
        epoch_budgets: config.ablation.epochs.clone(),
        base_config: model_config(config, config.model.variant, &data.vocab),
        hyper: config.training.clone(),
        averaging: config.ablation.averaging,
        split_seed: config.split.seed,
        config_hash: Some(config.hash()),
    };
    let cells = run_ablation(&plan, &data.train, &data.test, on_cell);
    let dir = config.reports_dir();
    let files = write_reports(&dir, &cells, config.split.seed).map_err(PipelineError::io(&dir))?;
    let store = config.store();
    let bytecode_origins = data
        .split
        .train
        .iter()
        .chain(&data.split.test)
        .filter_map(|id| store.load_meta(id))
        .map(|m| m.bytecode_origin)
        .collect();
    let provenance = Provenance {
        config_hash: config.hash(),
        split_seed: config.split.seed,
        train_seed: config.training.seed,
        init_seed: config.model.init_seed,
        test_fraction: config.split.test_fraction,
        class_histogram: class_histogram(&data.records),
        train_size: data.train.len(),
        test_size: data.test.len(),
        skipped: &data.skipped,
        bytecode_origins,
        embedding: &config.embedding,
        variants: &plan.variants,
        epochs: &plan.epoch_budgets,
    };
    let path = dir.join(format!("provenance_s{}.json", config.split.seed));
    write_json(&path, &provenance)?;
    Ok(AblationSummary { cells, files, provenance: path, skipped: data.skipped })
}

/// Classifies one source file with a trained checkpoint. Cleaning, sequence
/// length and the embedding provider come from the checkpoint; the compiler
/// and embedding cache from `config`.
pub fn predict<T: Scalar>(
    config: &PipelineConfig,
    checkpoint: &Path,
    source: &Path,
    bytecode: Option<&str>,
) -> Result<Prediction> {
    let (meta, trained, vocab) = Checkpoint::read(checkpoint)?;
    let model = Model::<T>::load(checkpoint)?;
    let text = std::fs::read_to_string(source).map_err(PipelineError::io(source))?;
    let variant = model.variant();
    let mut input = ModelInput::<T> { text: Some(clean_source(&text, trained.clean).text), ..Default::default() };
    if variant.uses(FeatureKind::Opcodes) || variant.uses(FeatureKind::Graph) {
        let runtime = PipelineConfig { embedding: trained.embedding.clone(), ..config.clone() };
        let provider = make_provider(&runtime)?;
        let compiler = match bytecode {
            Some(_) => None,
            None => Some(SolidityCompiler::discover(&config.compiler)?),
        };
        let derived = derive_features(&text, bytecode, compiler.as_ref(), trained.clean, provider.as_ref())?;
        input.opcodes = Some(tokenize_and_pad(&derived.ops, &vocab, trained.max_sequence_len)?);
        input.graph = Some(derived.graph.cast::<T>());
    }
    let proba = model.predict_proba(&[&input])?;
    let probabilities: BTreeMap<Label, f64> =
        Label::ALL.iter().map(|&l| (l, proba[[0, l.index()]].to_f64_lossy())).collect();
    let label = Label::ALL
        .into_iter()
        .max_by(|a, b| probabilities[a].total_cmp(&probabilities[b]).then(b.index().cmp(&a.index())))
        .expect("three classes");
    Ok(Prediction { label, probabilities, config_hash: meta.config_hash })
}
