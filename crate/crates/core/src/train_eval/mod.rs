//! Training loop, evaluation metrics and the variant × epoch ablation grid.

mod metrics;
mod report;

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scvd_autograd::{Adam, Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::model::{assemble_variant, FeatureKind, Model, ModelError, ModelInput, ModelVariantConfig, Variant};

pub use metrics::{Averaging, ClassMetrics, ConfusionMatrix, Metrics};
pub use report::{render_table, write_reports, ReportFiles};

/// Epoch budgets of the ablation grid.
pub const DEFAULT_EPOCH_BUDGETS: [usize; 3] = [10, 20, 30];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("record {record} lacks the {kind} feature")]
    MissingFeature { record: String, kind: FeatureKind },
    #[error("invalid training hyperparameters: {0}")]
    Hyper(String),
    #[error("the test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Drives shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self { batch_size: 32, learning_rate: 0.001, epochs: 10, seed: 0 }
    }
}

impl TrainingHyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Hyper("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Hyper(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One labeled, feature-materialized record.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub id: String,
    pub input: ModelInput<T>,
    pub label: Label,
}

impl<T> Example<T> {
    pub fn new(id: impl Into<String>, input: ModelInput<T>, label: Label) -> Self {
        Self { id: id.into(), input, label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's batches, weighted by batch size.
    pub loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<EpochStats>,
    pub train_seconds: f64,
    pub steps: usize,
}

fn check_features<T>(examples: &[Example<T>], required: &[FeatureKind]) -> Result<(), TrainError> {
    for ex in examples {
        for &kind in required {
            let present = match kind {
                FeatureKind::Text => ex.input.text.is_some(),
                FeatureKind::Opcodes => ex.input.opcodes.is_some(),
                FeatureKind::Graph => ex.input.graph.is_some(),
            };
            if !present {
                return Err(TrainError::MissingFeature { record: ex.id.clone(), kind });
            }
        }
    }
    Ok(())
}

fn argmax_rows<T: Scalar>(m: &Array2<T>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mini-batch Adam on the cross-entropy objective. Batches are drawn from a
/// fresh seeded permutation every epoch.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    examples: &[Example<T>],
    hyper: &TrainingHyper,
) -> Result<TrainOutcome<T>, TrainError> {
    hyper.validate()?;
    check_features(examples, model.required_features())?;
    let start = Instant::now();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut steps = 0;
    if hyper.epochs > 0 && !examples.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut adam = Adam::new(T::lit(hyper.learning_rate));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 1..=hyper.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<&ModelInput<T>> = chunk.iter().map(|&i| &examples[i].input).collect();
                let targets: Vec<usize> = chunk.iter().map(|&i| examples[i].label.index()).collect();
                let tape = Tape::new();
                let logits = model.logits(&tape, &batch, Some(&mut rng))?;
                let loss = tape.cross_entropy(logits, &targets);
                loss_sum += tape.value(loss)[[0, 0]].to_f64_lossy() * chunk.len() as f64;
                let predicted = argmax_rows(&tape.value(logits));
                correct += predicted.iter().zip(&targets).filter(|(p, t)| p == t).count();
                let grads = tape.backward(loss);
                adam.step(model.store_mut(), &grads);
                steps += 1;
            }
            let n = examples.len() as f64;
            history.push(EpochStats { epoch, loss: loss_sum / n, accuracy: correct as f64 / n });
        }
    }
    Ok(TrainOutcome { model, history, train_seconds: start.elapsed().as_secs_f64(), steps })
}

/// Argmax class predictions in batches of `batch_size`.
pub fn predict_labels<T: Scalar>(
    model: &Model<T>,
    inputs: &[&ModelInput<T>],
    batch_size: usize,
) -> Result<Vec<Label>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let p = model.predict_proba(chunk)?;
        out.extend(argmax_rows(&p).into_iter().map(|i| Label::from_index(i).expect("three classes")));
    }
    Ok(out)
}

/// Scores of one trained model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub epochs: usize,
    pub averaging: Averaging,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions, in label order.
    pub confusion: ConfusionMatrix,
    pub test_size: usize,
    pub train_seconds: f64,
    pub predict_seconds: f64,
    pub split_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub config_hash: Option<String>,
}

/// Predicts the whole test set, timing it, and scores the predictions.
/// Training fields (`epochs`, `train_seconds`, seeds) are left for the
/// caller to fill.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    test: &[Example<T>],
    averaging: Averaging,
) -> Result<EvaluationReport, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    check_features(test, model.required_features())?;
    let inputs: Vec<&ModelInput<T>> = test.iter().map(|e| &e.input).collect();
    let start = Instant::now();
    let predicted = predict_labels(model, &inputs, 32)?;
    let predict_seconds = start.elapsed().as_secs_f64();
    let mut confusion = ConfusionMatrix::default();
    for (ex, p) in test.iter().zip(&predicted) {
        confusion.record(ex.label, *p);
    }
    let m = Metrics::from_confusion(&confusion, averaging);
    Ok(EvaluationReport {
        variant: model.variant(),
        epochs: 0,
        averaging,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        per_class: m.per_class,
        confusion,
        test_size: test.len(),
        train_seconds: 0.0,
        predict_seconds,
        split_seed: None,
        train_seed: None,
        config_hash: None,
    })
}

/// Settings shared by every cell of an ablation grid.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub epoch_budgets: Vec<usize>,
    /// Template for every cell; its `variant` is replaced per cell.
    pub base_config: ModelVariantConfig,
    /// `epochs` is replaced per cell.
    pub hyper: TrainingHyper,
    pub averaging: Averaging,
    pub split_seed: u64,
    /// Pipeline-level hash recorded in the reports, if any.
    pub config_hash: Option<String>,
}

impl AblationPlan {
    pub fn full_grid(base_config: ModelVariantConfig, hyper: TrainingHyper, split_seed: u64) -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            epoch_budgets: DEFAULT_EPOCH_BUDGETS.to_vec(),
            base_config,
            hyper,
            averaging: Averaging::Weighted,
            split_seed,
            config_hash: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub epochs: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub result: CellResult,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellResult {
    Ok { report: Box<EvaluationReport>, history: Vec<EpochStats> },
    Failed { error: String },
}

impl AblationCell {
    pub fn report(&self) -> Option<&EvaluationReport> {
        match &self.result {
            CellResult::Ok { report, .. } => Some(report),
            CellResult::Failed { .. } => None,
        }
    }
}

/// Trains and evaluates every (variant, budget) pair on the same train and
/// test examples. A failing cell is recorded and the grid continues.
/// `on_cell` sees each cell as soon as it finishes.
pub fn run_ablation<T: Scalar>(
    plan: &AblationPlan,
    train_set: &[Example<T>],
    test_set: &[Example<T>],
    mut on_cell: impl FnMut(&AblationCell),
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &variant in &plan.variants {
        for &epochs in &plan.epoch_budgets {
            let result = match run_cell(plan, variant, epochs, train_set, test_set) {
                Ok((report, history)) => CellResult::Ok { report: Box::new(report), history },
                Err(e) => CellResult::Failed { error: e.to_string() },
            };
            let cell = AblationCell { variant, epochs, seed: plan.split_seed, result };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    cells
}

fn run_cell<T: Scalar>(
    plan: &AblationPlan,
    variant: Variant,
    epochs: usize,
    train_set: &[Example<T>],
    test_set: &[Example<T>],
) -> Result<(EvaluationReport, Vec<EpochStats>), TrainError> {
    let config = ModelVariantConfig { variant, ..plan.base_config.clone() };
    let model = assemble_variant::<T>(&config)?;
    let hyper = TrainingHyper { epochs, ..plan.hyper.clone() };
    let outcome = train(model, train_set, &hyper)?;
    let mut report = evaluate(&outcome.model, test_set, plan.averaging)?;
    report.epochs = epochs;
    report.train_seconds = outcome.train_seconds;
    report.split_seed = Some(plan.split_seed);
    report.train_seed = Some(hyper.seed);
    report.config_hash = Some(plan.config_hash.clone().unwrap_or_else(|| config.hash()));
    Ok((report, outcome.history))
}
