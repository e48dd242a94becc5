use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Binary metrics with label 1 as the positive class. Precision and recall
/// are 0 when their denominator is 0, and so is F1 when `P + R = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self, EvalError> {
        let total = counts.total();
        if total == 0 {
            return Err(EvalError::Contract("metrics need at least one example".into()));
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(Self {
            accuracy: ratio(counts.tp + counts.tn, total),
            precision,
            recall,
            f1,
            counts,
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

pub fn compute_metrics(preds: &[u8], golds: &[u8]) -> Result<MetricsReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::Contract(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(EvalError::Contract(format!("labels must be 0 or 1, got ({p}, {g})"))),
        }
    }
    MetricsReport::from_counts(c)
}
