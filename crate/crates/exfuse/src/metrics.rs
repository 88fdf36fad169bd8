//! Confusion-matrix based evaluation: standard mean intersection-over-union.

use crate::error::{Error, Result};
use crate::tensor::{Labels, IGNORE_LABEL};

/// `counts[truth][pred]` over evaluated pixels; ignore pixels excluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    /// Accumulate one batch of predictions against ground truth.
    pub fn add(&mut self, truth: &Labels, pred: &Labels) -> Result<()> {
        if (truth.n, truth.h, truth.w) != (pred.n, pred.h, pred.w) {
            return Err(Error::shape("confusion_matrix", "label map sizes differ"));
        }
        for (&t, &p) in truth.data.iter().zip(pred.data.iter()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= self.classes || p as usize >= self.classes {
                return Err(Error::arg(
                    "confusion_matrix",
                    format!("labels ({t}, {p}) outside {} classes", self.classes),
                ));
            }
            self.record(t as usize, p as usize);
        }
        Ok(())
    }

    /// Total evaluated pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU: `tp / (row + col − tp)`. Classes that never appear in
    /// either truth or prediction have no defined IoU and come back as NaN.
    pub fn per_class_iou(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.at(c, c);
                let row: u64 = (0..self.classes).map(|j| self.at(c, j)).sum();
                let col: u64 = (0..self.classes).map(|i| self.at(i, c)).sum();
                let denom = row + col - tp;
                if denom == 0 {
                    f64::NAN
                } else {
                    tp as f64 / denom as f64
                }
            })
            .collect()
    }

    /// Mean IoU over the classes with a defined denominator. With every class
    /// empty the metric is undefined and reported as an error, not 0.
    pub fn miou(&self) -> Result<f64> {
        let ious = self.per_class_iou();
        let defined: Vec<f64> = ious.into_iter().filter(|v| !v.is_nan()).collect();
        if defined.is_empty() {
            return Err(Error::Metric("no class has any evaluated pixel".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}
