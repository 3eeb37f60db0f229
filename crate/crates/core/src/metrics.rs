//! Classification metrics: confusion matrices, macro precision/recall/F1
//! and cross-client mean±std aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};

/// `C×C` counts; rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + pred_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(SentinelError::dim(
                "confusion counts",
                num_classes * num_classes,
                counts.len(),
            ));
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
        })
    }
}

/// Which classes enter the macro averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacroMode {
    /// Average over all `C` classes (absent classes contribute zero).
    AllClasses,
    /// Average only over classes with at least one true sample.
    PresentOnly,
}

/// Per-class precision/recall/F1 plus accuracy and macro averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact confusion counts from paired label vectors.
pub fn confusion(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(SentinelError::dim("y_pred length", y_true.len(), y_pred.len()));
    }
    let mut counts = vec![0u64; num_classes * num_classes];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= num_classes || p >= num_classes {
            return Err(SentinelError::Index(format!(
                "label pair ({t}, {p}) at position {i} out of range for {num_classes} classes"
            )));
        }
        counts[t * num_classes + p] += 1;
    }
    ConfusionMatrix::from_counts(num_classes, counts)
}

/// Per-class precision `TP/(TP+FP)`, recall `TP/(TP+FN)` and their harmonic
/// mean. Classes with a zero denominator score 0. Macros are unweighted
/// means over the selected class set.
pub fn report(cm: &ConfusionMatrix, mode: MacroMode) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(SentinelError::InvalidArgument(
            "cannot report on an empty confusion matrix".into(),
        ));
    }
    let c = cm.num_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut correct = 0u64;
    for k in 0..c {
        correct += cm.count(k, k);
        let tp = cm.count(k, k) as f64;
        let fp: f64 = (0..c).filter(|&t| t != k).map(|t| cm.count(t, k) as f64).sum();
        let fn_: f64 = (0..c).filter(|&p| p != k).map(|p| cm.count(k, p) as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
        });
    }
    let included: Vec<usize> = match mode {
        MacroMode::AllClasses => (0..c).collect(),
        MacroMode::PresentOnly => (0..c)
            .filter(|&k| (0..c).any(|p| cm.count(k, p) > 0))
            .collect(),
    };
    let denom = included.len().max(1) as f64;
    let macro_of = |f: fn(&ClassScores) -> f64| -> f64 {
        included.iter().map(|&k| f(&per_class[k])).sum::<f64>() / denom
    };
    Ok(ClassificationReport {
        accuracy: correct as f64 / total as f64,
        macro_precision: macro_of(|s| s.precision),
        macro_recall: macro_of(|s| s.recall),
        macro_f1: macro_of(|s| s.f1),
        per_class,
    })
}

/// Arithmetic mean and sample standard deviation (N−1 denominator, 0 for a
/// single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "mean_std requires at least one value".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
