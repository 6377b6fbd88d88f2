use std::fmt;

use serde::{Deserialize, Serialize};

/// Binary classification scores with the fake class as positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when nothing was predicted fake, so precision is reported as 0.
    pub precision_undefined: bool,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            precision_undefined: tp + fp == 0,
        }
    }

    /// Counts from parallel label and prediction slices (0 real, 1 fake).
    pub fn from_predictions(labels: &[u8], predicted: &[u8]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&y, &p) in labels.iter().zip(predicted) {
            match (y, p) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (0, _) => tn += 1,
                _ => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.3}  precision {:.3}{}  recall {:.3}  f1 {:.3}  (tp {} fp {} tn {} fn {})",
            self.accuracy,
            self.precision,
            if self.precision_undefined { "*" } else { "" },
            self.recall,
            self.f1,
            self.tp,
            self.fp,
            self.tn,
            self.fn_
        )
    }
}
