//! Evaluation metrics: segmentation accuracy (from a confusion matrix),
//! boundary quality, and box overlap scores. All metrics lie in `[0, 1]`
//! and equal 1 on perfect predictions.

mod boundary;
mod boxes;
mod seg;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use boundary::{boundary_mask, boundary_metric, BoundaryMask, BoundaryMetric, LabelMap};
pub use boxes::{
    box_regression_score, detection_hit, iue_areas, Areas, BoxF, HIT_CONFIDENCE, HIT_IOU,
};
pub use seg::{argmax_labels, seg_metric, ConfusionMatrix, SegMetric};

/// Boundary band half-width in pixels.
pub const BOUNDARY_WIDTH: usize = 1;
/// Matching tolerance for boundary F1, in pixels.
pub const BF1_THETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Metric {
    MIoU,
    FWIoU,
    GAcc,
    MAcc,
    BIoU,
    BF1,
    /// Mean IoU of regressed boxes.
    BoxIoU,
    /// Fraction of samples detected with the right class (confidence ≥ 0.5)
    /// and box IoU ≥ 0.5.
    DetHit,
}

impl Metric {
    pub const SEGMENTATION: [Metric; 6] =
        [Metric::MIoU, Metric::FWIoU, Metric::GAcc, Metric::MAcc, Metric::BIoU, Metric::BF1];

    pub const fn name(self) -> &'static str {
        match self {
            Metric::MIoU => "miou",
            Metric::FWIoU => "fwiou",
            Metric::GAcc => "gacc",
            Metric::MAcc => "macc",
            Metric::BIoU => "biou",
            Metric::BF1 => "bf1",
            Metric::BoxIoU => "box_iou",
            Metric::DetHit => "det_hit",
        }
    }

    pub fn is_segmentation(self) -> bool {
        Metric::SEGMENTATION.contains(&self)
    }

    /// Segmentation score of class probabilities against one-hot targets,
    /// pooled over the whole batch.
    pub fn score_dense(self, pred: &Tensor4, target: &Tensor4) -> Result<f64> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {} vs target {}",
                pred.shape(),
                target.shape()
            )));
        }
        let classes = pred.shape().c;
        let seg = |kind| seg_metric(&ConfusionMatrix::from_tensors(pred, target)?, kind);
        let labels = |t: &Tensor4| {
            let s = t.shape();
            LabelMap::new(s.n, s.h, s.w, argmax_labels(t))
        };
        match self {
            Metric::MIoU => seg(SegMetric::MIoU),
            Metric::FWIoU => seg(SegMetric::FWIoU),
            Metric::GAcc => seg(SegMetric::GAcc),
            Metric::MAcc => seg(SegMetric::MAcc),
            Metric::BIoU | Metric::BF1 => {
                let kind = if self == Metric::BIoU { BoundaryMetric::BIoU } else { BoundaryMetric::BF1 };
                boundary_metric(&labels(pred)?, &labels(target)?, classes, kind, BOUNDARY_WIDTH, BF1_THETA)
            }
            Metric::BoxIoU | Metric::DetHit => Err(Error::Config(format!(
                "metric `{}` does not apply to dense predictions",
                self.name()
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Metric::MIoU,
            Metric::FWIoU,
            Metric::GAcc,
            Metric::MAcc,
            Metric::BIoU,
            Metric::BF1,
            Metric::BoxIoU,
            Metric::DetHit,
        ];
        let lower = s.trim().to_ascii_lowercase();
        all.into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

impl TryFrom<String> for Metric {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.name().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(labels: &[usize], shape: Shape) -> Tensor4 {
        let mut t = Tensor4::zeros(shape);
        let hw = shape.h * shape.w;
        for (k, &l) in labels.iter().enumerate() {
            let (n, p) = (k / hw, k % hw);
            t.set(n, l, p / shape.w, p % shape.w, 1.0);
        }
        t
    }

    #[test]
    fn names_round_trip() {
        for m in Metric::SEGMENTATION.into_iter().chain([Metric::BoxIoU, Metric::DetHit]) {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("map".parse::<Metric>().is_err());
    }

    #[test]
    fn seg_metrics_match_pixel_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..200 {
            let c = rng.random_range(2..5);
            let shape = Shape::new(rng.random_range(1..3), c, rng.random_range(2..7), rng.random_range(2..7));
            let target: Vec<usize> = (0..shape.positions()).map(|_| rng.random_range(0..c)).collect();
            let pred = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.random()).collect()).unwrap();
            let t = one_hot(&target, shape);
            let labels = argmax_labels(&pred);
            // direct recount from the label lists
            let mut iou = Vec::new();
            let mut acc = Vec::new();
            let mut fw = 0.0;
            let total = labels.len() as f64;
            let mut correct = 0usize;
            for k in 0..c {
                let tp = (0..labels.len()).filter(|&i| labels[i] == k && target[i] == k).count();
                let gt = target.iter().filter(|&&g| g == k).count();
                let pr = labels.iter().filter(|&&p| p == k).count();
                correct += tp;
                if gt + pr > 0 {
                    iou.push(tp as f64 / (gt + pr - tp) as f64);
                }
                if gt > 0 {
                    acc.push(tp as f64 / gt as f64);
                    fw += gt as f64 / total * tp as f64 / (gt + pr - tp) as f64;
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
            assert!(close(Metric::MIoU.score_dense(&pred, &t).unwrap(), mean(&iou)));
            assert!(close(Metric::MAcc.score_dense(&pred, &t).unwrap(), mean(&acc)));
            assert!(close(Metric::FWIoU.score_dense(&pred, &t).unwrap(), fw));
            assert!(close(Metric::GAcc.score_dense(&pred, &t).unwrap(), correct as f64 / total));
        }
    }

    #[test]
    fn invariant_under_argmax_preserving_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let shape = Shape::new(2, 3, 6, 6);
        for _ in 0..20 {
            let target: Vec<usize> = (0..shape.positions()).map(|_| rng.random_range(0..3)).collect();
            let t = one_hot(&target, shape);
            let pred = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
            let a = rng.random_range(0.5..3.0);
            let b = rng.random_range(-1.0..1.0);
            let mut warped = pred.clone();
            // strictly increasing map applied to every probability
            warped.data_mut().iter_mut().for_each(|v| *v = a * v.powf(1.7) + b);
            for m in Metric::SEGMENTATION {
                assert_eq!(m.score_dense(&pred, &t).unwrap(), m.score_dense(&warped, &t).unwrap());
            }
        }
    }

    #[test]
    fn bounded_and_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let shape = Shape::new(1, 4, 8, 8);
        let target: Vec<usize> = (0..64).map(|k| (k % 8) / 2).collect();
        let t = one_hot(&target, shape);
        for m in Metric::SEGMENTATION {
            assert_eq!(m.score_dense(&t, &t).unwrap(), 1.0);
            let pred = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.random()).collect()).unwrap();
            let v = m.score_dense(&pred, &t).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
