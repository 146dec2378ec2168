//! Confusion-matrix segmentation metrics.

use crate::error::{CacError, Result};

/// `K×K` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(CacError::Data(format!(
                "{} counts for a {num_classes}×{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel at `(label, prediction)`, skipping pixels whose
    /// label equals `ignore_index`.
    pub fn accumulate(&mut self, predictions: &[usize], labels: &[usize], ignore_index: Option<usize>) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(CacError::Dimension {
                op: "ConfusionMatrix::accumulate",
                lhs: vec![predictions.len()],
                rhs: vec![labels.len()],
            });
        }
        let k = self.num_classes;
        for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t >= k || p >= k {
                return Err(CacError::Data(format!(
                    "class out of range [0, {k}) at pixel {i}: truth {t}, prediction {p}"
                )));
            }
        }
        for (&p, &t) in predictions.iter().zip(labels) {
            if Some(t) != ignore_index {
                self.counts[t * k + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(CacError::Data("merging confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row(&self, k: usize) -> u64 {
        self.counts[k * self.num_classes..(k + 1) * self.num_classes].iter().sum()
    }

    fn col(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, k)).sum()
    }

    /// trace / total.
    pub fn pix_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(CacError::UndefinedMetric("pixel accuracy of an empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// IoU per class; `None` for classes absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.row(k) + self.col(k) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in truth or prediction.
    pub fn mean_iou(&self) -> Result<f64> {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(CacError::UndefinedMetric("mean IoU of an empty confusion matrix".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tally() {
        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], None).unwrap();
        assert_eq!(m.counts(), &[1, 1, 0, 2]);
    }

    #[test]
    fn empty_input_and_ignore() {
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&[], &[], None).unwrap();
        assert_eq!(m.total(), 0);
        m.accumulate(&[0, 2], &[255, 2], Some(255)).unwrap();
        assert_eq!(m.total(), 1);
        assert_eq!(m.get(2, 2), 1);
    }

    #[test]
    fn hand_evaluated_metrics() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        assert_eq!(m.pix_acc().unwrap(), 0.7);
        // IoU0 = 3/(4+5-3) = 1/2, IoU1 = 4/(6+5-4) = 4/7
        let iou = m.class_iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(4.0 / 7.0));
        assert!((m.mean_iou().unwrap() - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_and_all_wrong() {
        let m = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        assert_eq!(m.pix_acc().unwrap(), 1.0);
        assert_eq!(m.mean_iou().unwrap(), 1.0);
        let m = ConfusionMatrix::from_counts(2, vec![0, 3, 4, 0]).unwrap();
        assert_eq!(m.mean_iou().unwrap(), 0.0);
        assert_eq!(m.pix_acc().unwrap(), 0.0);
    }

    #[test]
    fn empty_matrix_is_undefined() {
        let m = ConfusionMatrix::new(2);
        assert!(matches!(m.pix_acc(), Err(CacError::UndefinedMetric(_))));
        assert!(matches!(m.mean_iou(), Err(CacError::UndefinedMetric(_))));
    }

    #[test]
    fn out_of_range_rejected_without_partial_update() {
        let mut m = ConfusionMatrix::new(2);
        assert!(matches!(m.accumulate(&[0, 2], &[0, 1], None), Err(CacError::Data(_))));
        assert_eq!(m.total(), 0);
    }
}
