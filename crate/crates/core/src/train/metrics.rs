//! Confusion-matrix segmentation metrics.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};

/// Which classes enter the mean IoU. Both conventions share one confusion
/// matrix and the same pixel accuracy; they differ only in whether class 0
/// contributes its IoU to the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    WithBackground,
    IgnoreBackground,
}

impl Convention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "with_background" => Ok(Convention::WithBackground),
            "ignore_background" => Ok(Convention::IgnoreBackground),
            other => Err(Error::Config(format!(
                "unknown metrics convention '{other}' (with_background | ignore_background)"
            ))),
        }
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    /// Pixels whose ground truth is `ignore_label` are skipped.
    pub fn add(&mut self, pred: &[i32], gt: &[i32], ignore_label: i32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err("metrics", format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let n = self.num_classes as i32;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore_label {
                continue;
            }
            if !(0..n).contains(&g) || !(0..n).contains(&p) {
                return Err(Error::Invalid {
                    op: "metrics",
                    detail: format!("label pair (gt {g}, pred {p}) at index {i} outside [0, {n})"),
                });
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let correct: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| correct as f64 / total as f64)
    }

    /// `TP / (TP + FP + FN)`; `None` when the class is absent from both.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let gt: u64 = (0..self.num_classes).map(|p| self.get(class, p)).sum();
        let pred: u64 = (0..self.num_classes).map(|g| self.get(g, class)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over `classes`, skipping classes absent from both masks.
    pub fn mean_iou_over(&self, classes: impl IntoIterator<Item = usize>) -> Option<f64> {
        let ious: Vec<f64> = classes.into_iter().filter_map(|c| self.iou(c)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn mean_iou(&self, convention: Convention) -> Option<f64> {
        let start = match convention {
            Convention::WithBackground => 0,
            Convention::IgnoreBackground => 1,
        };
        self.mean_iou_over(start..self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub pix_acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub sync_events: u64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, convention: Convention) -> Result<Self> {
        let pix_acc = cm.pixel_accuracy().ok_or(Error::EmptyEvaluation)?;
        let miou = cm.mean_iou(convention).ok_or(Error::EmptyEvaluation)?;
        Ok(MetricsReport {
            pix_acc,
            per_class_iou: (0..cm.num_classes).map(|c| cm.iou(c)).collect(),
            miou,
            losses: BTreeMap::new(),
            lr: 0.0,
            sync_events: 0,
        })
    }
}

pub fn metrics(pred: &[i32], gt: &[i32], num_classes: usize, convention: Convention, ignore_label: i32) -> Result<MetricsReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore_label)?;
    MetricsReport::from_confusion(&cm, convention)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_example() {
        let r = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, Convention::WithBackground, 255).unwrap();
        assert_eq!(r.pix_acc, 0.75);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 0.583_333_333_333_333_3).abs() < 1e-15);
        let nb = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, Convention::IgnoreBackground, 255).unwrap();
        assert_eq!(nb.miou, 2.0 / 3.0);
    }

    #[test]
    fn perfect_and_empty() {
        let r = metrics(&[2, 1, 0, 2], &[2, 1, 0, 2], 4, Convention::WithBackground, 255).unwrap();
        assert_eq!((r.pix_acc, r.miou), (1.0, 1.0));
        assert_eq!(r.per_class_iou[3], None);
        assert!(matches!(metrics(&[0], &[255], 2, Convention::WithBackground, 255), Err(Error::EmptyEvaluation)));
    }
}
