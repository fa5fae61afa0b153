use crate::error::{Error, Result};

use super::seg::{seg_metric, ConfusionMatrix, SegMetric};

/// Class labels of a batch of images, `(n, h, w)` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::Shape(format!(
                "{} labels for a {n}x{h}x{w} map",
                labels.len()
            )));
        }
        Ok(LabelMap { n, h, w, labels })
    }

    fn same_dims(&self, other: &LabelMap) -> Result<()> {
        if (self.n, self.h, self.w) != (other.n, other.h, other.w) {
            return Err(Error::Shape("label maps differ in size".into()));
        }
        Ok(())
    }
}

/// Pixels that have a differently-labelled pixel within Chebyshev distance
/// `width`. The image border is not a boundary by itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl BoundaryMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

pub fn boundary_mask(labels: &LabelMap, width: usize) -> BoundaryMask {
    assert!(width >= 1, "boundary width must be at least 1");
    let (h, w) = (labels.h, labels.w);
    let d = width as isize;
    let mut mask = vec![false; labels.labels.len()];
    for n in 0..labels.n {
        let base = n * h * w;
        let img = &labels.labels[base..base + h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let own = img[(i * w as isize + j) as usize];
                let mut hit = false;
                'scan: for r in (i - d).max(0)..=(i + d).min(h as isize - 1) {
                    for c in (j - d).max(0)..=(j + d).min(w as isize - 1) {
                        if img[(r * w as isize + c) as usize] != own {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
                mask[base + (i * w as isize + j) as usize] = hit;
            }
        }
    }
    BoundaryMask { n: labels.n, h, w, width, mask }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryMetric {
    /// Mean IoU restricted to the union of the two boundary bands.
    BIoU,
    /// F1 of boundary pixels matched to a same-class boundary pixel within
    /// Euclidean distance `theta`.
    BF1,
}

pub fn boundary_metric(
    pred: &LabelMap,
    target: &LabelMap,
    classes: usize,
    kind: BoundaryMetric,
    width: usize,
    theta: f64,
) -> Result<f64> {
    pred.same_dims(target)?;
    let pb = boundary_mask(pred, width);
    let tb = boundary_mask(target, width);
    match kind {
        BoundaryMetric::BIoU => {
            let mut cm = ConfusionMatrix::new(classes);
            for k in 0..pred.labels.len() {
                if pb.mask[k] || tb.mask[k] {
                    cm.accumulate(&[pred.labels[k]], &[target.labels[k]]);
                }
            }
            if cm.total() == 0 {
                return Ok(1.0);
            }
            seg_metric(&cm, SegMetric::MIoU)
        }
        BoundaryMetric::BF1 => {
            let (np, nt) = (pb.count(), tb.count());
            if np == 0 && nt == 0 {
                return Ok(1.0);
            }
            if np == 0 || nt == 0 {
                return Ok(0.0);
            }
            let matched_pred = matched(&pb, pred, &tb, target, theta);
            let matched_target = matched(&tb, target, &pb, pred, theta);
            let precision = matched_pred as f64 / np as f64;
            let recall = matched_target as f64 / nt as f64;
            if precision + recall == 0.0 {
                return Ok(0.0);
            }
            Ok(2.0 * precision * recall / (precision + recall))
        }
    }
}

/// Number of boundary pixels of `a` with a same-label boundary pixel of `b`
/// within distance `theta`.
fn matched(a: &BoundaryMask, la: &LabelMap, b: &BoundaryMask, lb: &LabelMap, theta: f64) -> usize {
    let (h, w) = (a.h as isize, a.w as isize);
    let r = theta.floor() as isize;
    let theta2 = theta * theta;
    let mut count = 0;
    for n in 0..a.n {
        let base = n * a.h * a.w;
        for i in 0..h {
            for j in 0..w {
                let k = base + (i * w + j) as usize;
                if !a.mask[k] {
                    continue;
                }
                let label = la.labels[k];
                let mut found = false;
                'search: for di in -r..=r {
                    for dj in -r..=r {
                        let (y, x) = (i + di, j + dj);
                        if y < 0 || y >= h || x < 0 || x >= w || (di * di + dj * dj) as f64 > theta2 {
                            continue;
                        }
                        let q = base + (y * w + x) as usize;
                        if b.mask[q] && lb.labels[q] == label {
                            found = true;
                            break 'search;
                        }
                    }
                }
                count += usize::from(found);
            }
        }
    }
    count
}
