//! Confusion-matrix accumulation, pixel accuracy and mean IoU.

use std::fmt::Write as _;

use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies every pixel whose truth is not the ignore index. Nothing is
    /// counted if any id is out of range.
    pub fn update(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("confusion_update", &[pred.len()], &[truth.len()]));
        }
        let d = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            if let Some(label) = [t, p].into_iter().find(|&l| l as usize >= d) {
                return Err(Error::LabelOutOfRange { label, num_classes: d });
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != IGNORE_INDEX {
                self.counts[t as usize * d + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion_merge", &[self.num_classes], &[other.num_classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn pix_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("pixel accuracy of an empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Per-class IoU; `None` for classes absent from both truth and
    /// prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let d = self.num_classes;
        (0..d)
            .map(|c| {
                let row: u64 = (0..d).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..d).map(|i| self.get(i, c)).sum();
                let tp = self.get(c, c);
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-zero denominator.
    pub fn mean_iou(&self) -> Result<f64> {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Data("mean IoU with no class present".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// `class,iou` rows (empty value for absent classes) followed by
    /// `pixacc,<v>` and `miou,<v>`.
    pub fn report_csv(&self) -> Result<String> {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.class_iou().into_iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c},{v:.6}").unwrap(),
                None => writeln!(out, "{c},").unwrap(),
            }
        }
        writeln!(out, "pixacc,{:.6}", self.pix_acc()?).unwrap();
        writeln!(out, "miou,{:.6}", self.mean_iou()?).unwrap();
        Ok(out)
    }
}
