//! Classification metrics: confusion matrices, per-class precision, recall
//! and F1, and mean ± std summaries across folds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ClassLabel;

/// `counts[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_pairs(n_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Data(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n_classes || predicted >= self.n_classes {
            return Err(Error::Data(format!(
                "class index ({truth}, {predicted}) outside {} classes",
                self.n_classes
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Scores of class `k`. Empty denominators yield 0.
    pub fn class_scores(&self, k: usize) -> ClassScores {
        let tp = self.counts[k][k] as f64;
        let predicted: u64 = (0..self.n_classes).map(|t| self.counts[t][k]).sum();
        let support: u64 = self.counts[k].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
            support,
        }
    }

    /// Unweighted mean of per-class F1.
    pub fn macro_f1(&self) -> f64 {
        (0..self.n_classes).map(|k| self.class_scores(k).f1).sum::<f64>() / self.n_classes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: ClassLabel,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

/// Per-class precision/recall/F1 and accuracy summarised over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub classes: Vec<ClassRow>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub folds: Vec<ConfusionMatrix>,
}

impl MetricsTable {
    /// Summarises one confusion matrix per fold over the classes `labels`
    /// (matrix index `i` corresponds to `labels[i]`).
    pub fn from_folds(labels: &[ClassLabel], folds: Vec<ConfusionMatrix>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Data("no folds to summarise".into()));
        }
        if folds.iter().any(|f| f.n_classes != labels.len()) {
            return Err(Error::Data("fold class count does not match the label set".into()));
        }
        let classes = labels
            .iter()
            .enumerate()
            .map(|(k, &label)| {
                let s: Vec<ClassScores> = folds.iter().map(|f| f.class_scores(k)).collect();
                ClassRow {
                    label,
                    precision: MeanStd::of(&s.iter().map(|x| x.precision).collect::<Vec<_>>()),
                    recall: MeanStd::of(&s.iter().map(|x| x.recall).collect::<Vec<_>>()),
                    f1: MeanStd::of(&s.iter().map(|x| x.f1).collect::<Vec<_>>()),
                }
            })
            .collect();
        let accuracy = MeanStd::of(&folds.iter().map(|f| f.accuracy()).collect::<Vec<_>>());
        let macro_f1 = MeanStd::of(&folds.iter().map(|f| f.macro_f1()).collect::<Vec<_>>());
        Ok(Self {
            classes,
            accuracy,
            macro_f1,
            folds,
        })
    }

    /// Plain-text table: one row per class, then overall accuracy in percent.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let pm = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        let _ = writeln!(out, "{:<14} {:<14} {:<14} {:<14}", "Class", "Precision", "Recall", "F1-score");
        for row in &self.classes {
            let name = format!("{} ({})", row.label.code(), row.label.word());
            let _ = writeln!(
                out,
                "{:<14} {:<14} {:<14} {:<14}",
                name,
                pm(&row.precision),
                pm(&row.recall),
                pm(&row.f1)
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:.2} ± {:.2} %",
            "Accuracy",
            100.0 * self.accuracy.mean,
            100.0 * self.accuracy.std
        );
        let _ = writeln!(out, "{:<14} {}", "Macro F1", pm(&self.macro_f1));
        let _ = writeln!(out, "({} folds)", self.folds.len());
        out
    }

    pub fn render_structured(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Splits `n` items into `k` contiguous folds of near-equal size.
pub fn fold_ranges(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let k = k.max(1).min(n.max(1));
    (0..k).map(|i| (i * n / k)..((i + 1) * n / k)).collect()
}
