use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxF { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxF::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Orders each coordinate pair so that `x1 <= x2` and `y1 <= y2`.
    pub fn canonical(self) -> Self {
        BoxF::new(
            self.x1.min(self.x2),
            self.y1.min(self.y2),
            self.x1.max(self.x2),
            self.y1.max(self.y2),
        )
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let a = iue_areas(self, other);
        if a.union > 0.0 {
            a.inter / a.union
        } else {
            0.0
        }
    }
}

/// Intersection, union and enclosing-box areas of a prediction/target pair,
/// with derivatives of each with respect to the predicted coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Areas {
    pub inter: f64,
    pub union: f64,
    pub enclose: f64,
    pub d_inter: [f64; 4],
    pub d_union: [f64; 4],
    pub d_enclose: [f64; 4],
}

/// Derivatives of `min(a, b)` / `max(a, b)` with respect to `a`, taking
/// the left-sided value at ties.
#[inline]
fn dmin(a: f64, b: f64) -> f64 {
    if a <= b {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn dmax(a: f64, b: f64) -> f64 {
    if a >= b {
        1.0
    } else {
        0.0
    }
}

pub fn iue_areas(pred: &BoxF, target: &BoxF) -> Areas {
    let (p, t) = (pred, target);

    let iw_raw = p.x2.min(t.x2) - p.x1.max(t.x1);
    let ih_raw = p.y2.min(t.y2) - p.y1.max(t.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    // d iw / d (x1, x2), zero once the overlap has collapsed
    let (diw_x1, diw_x2) = if iw_raw > 0.0 { (-dmax(p.x1, t.x1), dmin(p.x2, t.x2)) } else { (0.0, 0.0) };
    let (dih_y1, dih_y2) = if ih_raw > 0.0 { (-dmax(p.y1, t.y1), dmin(p.y2, t.y2)) } else { (0.0, 0.0) };
    let d_inter = [diw_x1 * ih, dih_y1 * iw, diw_x2 * ih, dih_y2 * iw];

    let (pw, ph) = (p.width(), p.height());
    let d_parea = [-ph, -pw, ph, pw];
    let union = pw * ph + t.area() - inter;
    let mut d_union = [0.0; 4];
    for k in 0..4 {
        d_union[k] = d_parea[k] - d_inter[k];
    }

    let ew = p.x2.max(t.x2) - p.x1.min(t.x1);
    let eh = p.y2.max(t.y2) - p.y1.min(t.y1);
    let enclose = ew * eh;
    let d_enclose = [
        -dmin(p.x1, t.x1) * eh,
        -dmin(p.y1, t.y1) * ew,
        dmax(p.x2, t.x2) * eh,
        dmax(p.y2, t.y2) * ew,
    ];

    Areas { inter, union, enclose, d_inter, d_union, d_enclose }
}

/// Mean IoU over paired boxes.
pub fn box_regression_score(pred: &[BoxF], target: &[BoxF]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Config(format!(
            "{} predicted boxes for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let t = t.canonical();
        if t.is_degenerate() {
            return Err(Error::Config(format!("degenerate target box {t:?}")));
        }
        sum += p.canonical().iou(&t);
    }
    Ok(sum / pred.len() as f64)
}

/// Minimum class confidence and box IoU for a detection to count as a hit.
pub const HIT_CONFIDENCE: f64 = 0.5;
pub const HIT_IOU: f64 = 0.5;

/// A detection hit: the target class is the argmax with probability at least
/// [`HIT_CONFIDENCE`] and the box overlaps its target with IoU at least
/// [`HIT_IOU`].
pub fn detection_hit(class_probs: &[f64], class: usize, pred: &BoxF, target: &BoxF) -> bool {
    let p = class_probs[class];
    let is_argmax = class_probs.iter().enumerate().all(|(c, &q)| c == class || q < p || (q == p && c > class));
    is_argmax && p >= HIT_CONFIDENCE && pred.canonical().iou(&target.canonical()) >= HIT_IOU
}
