use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Per-pixel argmax over the channel axis, ties to the lowest channel.
/// Output layout is `(n, h, w)` row-major.
pub fn argmax_labels(t: &Tensor4) -> Vec<usize> {
    let s = t.shape();
    let hw = s.h * s.w;
    let data = t.data();
    let mut out = Vec::with_capacity(s.positions());
    for n in 0..s.n {
        let base = n * s.c * hw;
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = data[base + p];
            for c in 1..s.c {
                let v = data[base + c * hw + p];
                if v > best_v || (best_v.is_nan() && !v.is_nan()) {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

/// `counts[g * classes + p]`: pixels of true class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Self {
        let classes = rows.len();
        let mut cm = ConfusionMatrix::new(classes);
        for (g, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), classes, "confusion matrix must be square");
            cm.counts[g * classes..(g + 1) * classes].copy_from_slice(row);
        }
        cm
    }

    pub fn from_labels(pred: &[usize], target: &[usize], classes: usize) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "{} predicted labels vs {} target labels",
                pred.len(),
                target.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(pred, target);
        Ok(cm)
    }

    /// Confusion of class-probability predictions against one-hot targets.
    pub fn from_tensors(pred: &Tensor4, target: &Tensor4) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {} vs target {}",
                pred.shape(),
                target.shape()
            )));
        }
        Self::from_labels(&argmax_labels(pred), &argmax_labels(target), pred.shape().c)
    }

    pub fn accumulate(&mut self, pred: &[usize], target: &[usize]) {
        for (&p, &g) in pred.iter().zip(target) {
            self.counts[g * self.classes + p] += 1;
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, g: usize) -> u64 {
        self.counts[g * self.classes..(g + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, p)).sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegMetric {
    MIoU,
    FWIoU,
    GAcc,
    MAcc,
}

/// Segmentation accuracy from a confusion matrix. Classes absent from both
/// the ground truth and the prediction are left out of class means; for
/// mean accuracy, classes with no ground-truth pixels are left out.
pub fn seg_metric(cm: &ConfusionMatrix, kind: SegMetric) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::MetricUndefined("empty confusion matrix".into()));
    }
    let total = total as f64;
    let k = cm.classes();
    let value = match kind {
        SegMetric::GAcc => cm.trace() as f64 / total,
        SegMetric::MIoU => {
            let mut sum = 0.0;
            let mut present = 0usize;
            for c in 0..k {
                let tp = cm.get(c, c);
                let union = cm.row_sum(c) + cm.col_sum(c) - tp;
                if union > 0 {
                    sum += tp as f64 / union as f64;
                    present += 1;
                }
            }
            sum / present as f64
        }
        SegMetric::FWIoU => {
            let mut sum = 0.0;
            for c in 0..k {
                let gt = cm.row_sum(c);
                if gt == 0 {
                    continue;
                }
                let tp = cm.get(c, c);
                let union = gt + cm.col_sum(c) - tp;
                sum += (gt as f64 / total) * (tp as f64 / union as f64);
            }
            sum
        }
        SegMetric::MAcc => {
            let mut sum = 0.0;
            let mut present = 0usize;
            for c in 0..k {
                let gt = cm.row_sum(c);
                if gt > 0 {
                    sum += cm.get(c, c) as f64 / gt as f64;
                    present += 1;
                }
            }
            sum / present as f64
        }
    };
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_two_class_matrix() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_rows(&[&[1, 1], &[0, 2]]));
        let miou = seg_metric(&cm, SegMetric::MIoU).unwrap();
        assert!((miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(seg_metric(&cm, SegMetric::GAcc).unwrap(), 0.75);
        assert_eq!(seg_metric(&cm, SegMetric::MAcc).unwrap(), 0.75);
        let fw = seg_metric(&cm, SegMetric::FWIoU).unwrap();
        assert!((fw - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_hopeless_predictions() {
        let diag = ConfusionMatrix::from_rows(&[&[3, 0, 0], &[0, 5, 0], &[0, 0, 1]]);
        for kind in [SegMetric::MIoU, SegMetric::FWIoU, SegMetric::GAcc, SegMetric::MAcc] {
            assert_eq!(seg_metric(&diag, kind).unwrap(), 1.0);
        }
        let off = ConfusionMatrix::from_rows(&[&[0, 4], &[2, 0]]);
        assert_eq!(seg_metric(&off, SegMetric::MIoU).unwrap(), 0.0);
        assert!(seg_metric(&ConfusionMatrix::new(3), SegMetric::GAcc).is_err());
    }

    #[test]
    fn single_class_prediction_fills_one_column() {
        let cm = ConfusionMatrix::from_labels(&[2; 6], &[0, 1, 2, 0, 1, 2], 3).unwrap();
        for g in 0..3 {
            for p in 0..2 {
                assert_eq!(cm.get(g, p), 0);
            }
            assert_eq!(cm.get(g, 2), 2);
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_channel() {
        let t = Tensor4::from_vec(Shape::new(1, 3, 1, 2), vec![0.2, 0.5, 0.4, 0.5, 0.4, 0.0]).unwrap();
        assert_eq!(argmax_labels(&t), vec![1, 0]);
    }

    #[test]
    fn fwiou_never_exceeds_global_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let k = rng.random_range(2..6);
            let n = rng.random_range(1..200);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let target: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let cm = ConfusionMatrix::from_labels(&pred, &target, k).unwrap();
            let fw = seg_metric(&cm, SegMetric::FWIoU).unwrap();
            let acc = seg_metric(&cm, SegMetric::GAcc).unwrap();
            assert!(fw <= acc + 1e-12);
        }
    }
}
