//! End-to-end orchestration: configuration, the on-disk feature store, and
//! the train / evaluate / ablation / predict commands built on it.

mod commands;
mod features;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusError, DEFAULT_TEST_FRACTION};
use crate::embedding::{EmbeddingError, ProviderKind};
use crate::evm::{CompilerConfig, CompilerError, EvmError, MAX_SEQUENCE_LEN};
use crate::model::{ModelError, ModelVariantConfig, Variant};
use crate::solidity_prep::CleanOptions;
use crate::synthetic::SYNTHETIC_VOCAB_ROWS;
use crate::train_eval::{Averaging, TrainError, TrainingHyper, DEFAULT_EPOCH_BUDGETS};

pub use commands::{
    ablation, evaluate_checkpoint, predict, train, AblationSummary, Checkpoint, Prediction, TrainSummary,
};
pub use features::{
    derive_features, load_examples, materialize, DerivedFeatures, FeatureFailure, FeatureReport, FeatureStore,
    RecordMeta,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Compiler(#[from] CompilerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Evm(#[from] EvmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("features for {id} are missing or stale; run the features command first")]
    FeaturesMissing { id: String },
    #[error("cannot derive the {stage} feature: {reason}")]
    FeatureDerivationFailed { stage: &'static str, reason: String },
    #[error("{failed} of {total} records failed (threshold {threshold})")]
    ThresholdExceeded { failed: usize, total: usize, threshold: f64 },
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub provider: ProviderKind,
    /// Seed of the local provider; ignored by the remote one.
    pub local_seed: u64,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self { provider: ProviderKind::Local, local_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { test_fraction: DEFAULT_TEST_FRACTION, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub variants: Vec<Variant>,
    pub epochs: Vec<usize>,
    pub averaging: Averaging,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), epochs: DEFAULT_EPOCH_BUDGETS.to_vec(), averaging: Averaging::Weighted }
    }
}

/// Everything a run depends on. Serializes to one TOML file; its hash is
/// stamped into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub workspace: PathBuf,
    pub compiler: CompilerConfig,
    pub clean: CleanOptions,
    pub embedding: EmbeddingSettings,
    pub split: SplitSettings,
    pub max_sequence_len: usize,
    /// Variant used by `train`; widths and encoder preset for every command.
    /// `opcode_vocab_rows` is replaced by the fitted vocabulary's size.
    pub model: ModelVariantConfig,
    pub training: TrainingHyper,
    pub ablation: AblationSettings,
    pub dtype: Dtype,
    /// Largest tolerated fraction of records whose features fail.
    pub failure_threshold: f64,
    /// Parallel feature workers; 0 uses every core. Not part of the hash.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            workspace: PathBuf::from("workspace"),
            compiler: CompilerConfig::default(),
            clean: CleanOptions::default(),
            embedding: EmbeddingSettings::default(),
            split: SplitSettings::default(),
            max_sequence_len: MAX_SEQUENCE_LEN,
            model: ModelVariantConfig::for_variant(Variant::VulnSense, SYNTHETIC_VOCAB_ROWS),
            training: TrainingHyper::default(),
            ablation: AblationSettings::default(),
            dtype: Dtype::F32,
            failure_threshold: 0.1,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the split, training and initialization seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.training.seed = seed;
        self.model.init_seed = seed;
    }

    /// Short SHA-256 of the JSON form, with `workers` zeroed.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(PipelineError::Config(format!("split.test_fraction {} outside (0, 1)", self.split.test_fraction)));
        }
        if self.max_sequence_len == 0 {
            return Err(PipelineError::Config("max_sequence_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(PipelineError::Config(format!("failure_threshold {} outside [0, 1]", self.failure_threshold)));
        }
        self.training.validate()?;
        ModelVariantConfig { opcode_vocab_rows: SYNTHETIC_VOCAB_ROWS, ..self.model.clone() }.validate()?;
        Ok(())
    }

    pub fn store(&self) -> FeatureStore {
        FeatureStore::new(self.workspace.join("features"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.workspace.join("reports")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.workspace.join("models")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.workspace.join("cache")
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(PipelineError::io(path))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}
