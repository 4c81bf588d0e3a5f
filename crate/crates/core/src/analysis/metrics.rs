//! Confusion-matrix classification metrics. Undefined ratios (no predicted
//! or no true members of a class) count as zero.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// `counts[truth][predicted]`.
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch {
                what: "predictions vs labels".into(),
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (t, p) in truth.iter().zip(predicted) {
            if *t >= classes || *p >= classes {
                return Err(Error::invalid(format!(
                    "label {} out of range for {classes} classes",
                    t.max(p)
                )));
            }
            counts[*t][*p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.total();
        let trace: u64 = (0..self.classes).map(|i| self.counts[i][i]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for c in 0..self.classes {
            let tp = self.counts[c][c];
            let predicted: u64 = (0..self.classes).map(|t| self.counts[t][c]).sum();
            let actual: u64 = self.counts[c].iter().sum();
            p += ratio(tp, predicted);
            r += ratio(tp, actual);
            // 2tp / (2tp + fp + fn)
            f += ratio(2 * tp, predicted + actual);
        }
        let k = self.classes as f64;
        Metrics {
            accuracy: ratio(trace, n),
            precision: p / k,
            recall: r / k,
            f1: f / k,
        }
    }
}

/// Accuracy and macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn compute(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        Ok(ConfusionMatrix::new(classes, truth, predicted)?.metrics())
    }

    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            accuracy: sum(|m| m.accuracy),
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f1: sum(|m| m.f1),
        }
    }
}
