//! Confusion matrix and intersection-over-union.

use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::IGNORE;

/// Rows are ground truth, columns are predictions, both 0-based class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    /// Truth pixels left unlabelled by the prediction, per class.
    pub unlabeled: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes], unlabeled: vec![0; num_classes] }
    }

    /// Pixels whose ground truth is [`IGNORE`] are skipped. A predicted [`IGNORE`]
    /// counts as a miss against the true class without a false positive.
    pub fn add(&mut self, truth: &[u8], pred: &[u8]) {
        let c = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE || t as usize > c {
                continue;
            }
            let row = t as usize - 1;
            if p == IGNORE || p as usize > c {
                self.unlabeled[row] += 1;
            } else {
                self.counts[row * c + p as usize - 1] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unlabeled.iter_mut().zip(&other.unlabeled) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// `TP / (TP + FP + FN)`; `None` when the class is absent from both truth and predictions.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let c = self.num_classes;
        let tp = self.get(class, class);
        let row: u64 = (0..c).map(|j| self.get(class, j)).sum::<u64>() + self.unlabeled[class];
        let col: u64 = (0..c).map(|i| self.get(i, class)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes).map(|k| self.iou(k)).collect()
    }

    /// Mean over classes with a non-empty union.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().chain(&self.unlabeled).sum();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        diag as f64 / total as f64
    }
}

/// mIoU of one prediction/truth pair.
pub fn miou(truth: &[u8], pred: &[u8], num_classes: usize) -> f64 {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(truth, pred);
    cm.miou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let t = [1, 2, 2, 3];
        assert_eq!(miou(&t, &t, 3), 1.0);
        assert_eq!(miou(&[1, 1], &[2, 2], 2), 0.0);
    }

    #[test]
    fn hand_case() {
        // class1: tp 1, fp 1, fn 1 -> 1/3; class2: tp 1, fp 1, fn 1 -> 1/3
        let cm = {
            let mut cm = ConfusionMatrix::new(2);
            cm.add(&[1, 1, 2, 2, IGNORE], &[1, 2, 1, 2, 1]);
            cm
        };
        assert!((cm.iou(0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((cm.miou() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cm.pixel_accuracy(), 0.5);
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[1, 2], &[1, 2]);
        assert_eq!(cm.iou(2), None);
        assert_eq!(cm.miou(), 1.0);
    }
}
