use serde::{Deserialize, Serialize};

use crate::corpus::Label;

/// How per-class scores are combined into one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Weights proportional to each class's true count.
    #[default]
    Weighted,
    /// Unweighted mean over the three classes.
    Macro,
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "weighted" => Ok(Self::Weighted),
            "macro" => Ok(Self::Macro),
            other => Err(format!("unknown averaging {other:?} (expected weighted or macro)")),
        }
    }
}

/// 3×3 counts, rows = true class, columns = predicted class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(pub [[u64; 3]; 3]);

impl ConfusionMatrix {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        self.0[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|k| self.0[k][k]).sum()
    }

    /// True count of class `k`.
    pub fn support(&self, k: usize) -> u64 {
        self.0[k].iter().sum()
    }

    /// Number of predictions of class `k`.
    pub fn predicted(&self, k: usize) -> u64 {
        (0..3).map(|r| self.0[r][k]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Scores from counts alone. A class that is never predicted (or never
    /// present) scores 0 for the undefined ratio. An empty matrix scores 0.
    pub fn from_confusion(cm: &ConfusionMatrix, averaging: Averaging) -> Self {
        let total = cm.total();
        let per_class: Vec<ClassMetrics> = Label::ALL
            .iter()
            .map(|&label| {
                let k = label.index();
                let tp = cm.0[k][k];
                let precision = ratio(tp, cm.predicted(k));
                let recall = ratio(tp, cm.support(k));
                let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
                ClassMetrics { label, precision, recall, f1, support: cm.support(k) }
            })
            .collect();
        let accuracy = ratio(cm.trace(), total);
        let (precision, recall, f1) = match averaging {
            Averaging::Macro => {
                let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / 3.0;
                (mean(|c| c.precision), mean(|c| c.recall), mean(|c| c.f1))
            }
            Averaging::Weighted => {
                let weighted = |f: fn(&ClassMetrics) -> f64| {
                    if total == 0 {
                        0.0
                    } else {
                        per_class.iter().map(|c| c.support as f64 * f(c)).sum::<f64>() / total as f64
                    }
                };
                // support_k * (tp_k / support_k) is tp_k, so the weighted
                // recall is the trace over the total.
                (weighted(|c| c.precision), accuracy, weighted(|c| c.f1))
            }
        };
        Self { accuracy, precision, recall, f1, per_class }
    }
}
