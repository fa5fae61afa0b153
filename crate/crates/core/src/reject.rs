//! Loss rejection: descend cached predictions directly under a candidate
//! loss and measure how much the target metric improves; plus gradient-norm
//! fingerprints for spotting equivalent losses.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Bindings, GraphEvaluator, Leaf, MultiBranchLoss, Normalization};
use crate::metrics::{iue_areas, BoxF, Metric};
use crate::proxy::{score_sample, BranchSample, Example, ProxyTask, TaskKind};
use crate::tensor::Shape;

/// Default rejection threshold.
pub const ETA: f64 = 0.6;
/// Lower clamp applied to probabilities before renormalizing.
pub const MIN_PROB: f64 = 1e-6;
/// Smallest box side kept during descent.
pub const MIN_BOX_SIDE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig { lr: 0.001, momentum: 0.9, iterations: 500 }
    }
}

/// Cached predictions of an untrained predictor together with everything
/// needed to score them.
#[derive(Clone, Debug)]
pub struct RejectionContext {
    pub kind: TaskKind,
    pub metric: Metric,
    pub weights: Vec<f64>,
    pub eta: f64,
    pub descent: DescentConfig,
    samples: Vec<Vec<BranchSample>>,
    /// Metric of each cached prediction; `None` where undefined.
    base_scores: Vec<Option<f64>>,
}

/// Draws `b` distinct training examples and records the predictions of a
/// predictor freshly initialized from `rng`.
pub fn capture_samples<R: Rng + ?Sized>(task: &ProxyTask, b: usize, rng: &mut R) -> Result<RejectionContext> {
    if b == 0 || b > task.train.len() {
        return Err(Error::Config(format!(
            "cannot draw {b} rejection samples from {} training examples",
            task.train.len()
        )));
    }
    let predictor = task.init_predictor(rng);
    let picked: Vec<&Example> = index::sample(rng, task.train.len(), b).into_iter().map(|k| &task.train[k]).collect();
    let samples = task.predict_samples(&predictor, &picked);
    RejectionContext::new(task.kind, task.metric, task.branch_weights(), samples)
}

/// Outcome of the rejection test for one loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub g: f64,
    pub passed: bool,
    /// Per-sample metric change; 0 where the metric was undefined.
    pub deltas: Vec<f64>,
    /// Samples whose metric was undefined before or after descent.
    pub undefined: Vec<usize>,
    /// Descent steps completed per sample.
    pub steps: Vec<usize>,
}

impl RejectionContext {
    pub fn new(kind: TaskKind, metric: Metric, weights: Vec<f64>, samples: Vec<Vec<BranchSample>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("rejection needs at least one sample".into()));
        }
        if weights.len() != samples[0].len() {
            return Err(Error::Config(format!("{} weights for {} branches", weights.len(), samples[0].len())));
        }
        let base_scores = samples.iter().map(|s| score_sample(kind, metric, s).ok()).collect();
        Ok(RejectionContext { kind, metric, weights, eta: ETA, descent: DescentConfig::default(), samples, base_scores })
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn samples(&self) -> &[Vec<BranchSample>] {
        &self.samples
    }

    pub fn base_scores(&self) -> &[Option<f64>] {
        &self.base_scores
    }

    fn check(&self, loss: &MultiBranchLoss) -> Result<()> {
        let first = &self.samples[0];
        if loss.len() != first.len() {
            return Err(Error::Config(format!("{} loss branches for {} prediction heads", loss.len(), first.len())));
        }
        for (b, s) in loss.branches().iter().zip(first) {
            let ok = matches!(
                (b.inputs, s),
                (crate::expr::InputKind::Dense, BranchSample::Dense { .. })
                    | (crate::expr::InputKind::Areas, BranchSample::Box { .. })
            );
            if !ok {
                return Err(Error::Config(format!("branch `{}` does not match its prediction head", b.name)));
            }
        }
        Ok(())
    }

    /// Descends each cached prediction under `loss`; returns the optimized
    /// samples and the number of steps each one completed.
    pub fn optimize_predictions(&self, loss: &MultiBranchLoss) -> Result<Vec<(Vec<BranchSample>, usize)>> {
        self.check(loss)?;
        Ok(self.samples.iter().map(|s| descend(s, loss, &self.weights, &self.descent)).collect())
    }

    /// Mean metric improvement after descent.
    pub fn evaluate(&self, loss: &MultiBranchLoss) -> Result<RejectionReport> {
        let optimized = self.optimize_predictions(loss)?;
        let mut deltas = Vec::with_capacity(optimized.len());
        let mut undefined = Vec::new();
        let mut steps = Vec::with_capacity(optimized.len());
        for (k, (sample, n)) in optimized.iter().enumerate() {
            steps.push(*n);
            let after = if *n == 0 { self.base_scores[k] } else { score_sample(self.kind, self.metric, sample).ok() };
            match (self.base_scores[k], after) {
                (Some(before), Some(after)) => deltas.push(after - before),
                _ => {
                    undefined.push(k);
                    deltas.push(0.0);
                }
            }
        }
        let g = deltas.iter().sum::<f64>() / deltas.len() as f64;
        Ok(RejectionReport { g, passed: g >= self.eta, deltas, undefined, steps })
    }

    pub fn correlation_score(&self, loss: &MultiBranchLoss) -> Result<f64> {
        Ok(self.evaluate(loss)?.g)
    }

    pub fn passes_rejection(&self, loss: &MultiBranchLoss) -> Result<bool> {
        Ok(self.evaluate(loss)?.passed)
    }

    /// Per-branch, per-sample gradient norms rounded to two significant
    /// digits.
    pub fn fingerprint(&self, loss: &MultiBranchLoss) -> Result<Fingerprint> {
        self.check(loss)?;
        let mut norms = Vec::with_capacity(loss.len() * self.samples.len());
        for (b, branch) in loss.branches().iter().enumerate() {
            for sample in &self.samples {
                let norm = match &sample[b] {
                    BranchSample::Dense { yhat, y } => {
                        let mut ev = GraphEvaluator::new(&branch.body, yhat.shape());
                        ev.loss_and_grad(&Bindings::dense(yhat.data(), y.data()), Normalization::PerPosition);
                        l2(ev.leaf_grad(Leaf::YHat))
                    }
                    BranchSample::Box { pred, target } => {
                        let mut ev = GraphEvaluator::new(&branch.body, Shape::new(1, 1, 1, 1));
                        let d = box_loss_grad(&mut ev, pred, target, Normalization::PerPosition).1;
                        l2(&d)
                    }
                };
                norms.push(RoundedNorm::from_value(norm));
            }
        }
        Ok(Fingerprint { norms })
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Loss of an area branch at `pred` and its gradient with respect to the
/// box coordinates.
fn box_loss_grad(ev: &mut GraphEvaluator, pred: &BoxF, target: &BoxF, norm: Normalization) -> (f64, [f64; 4]) {
    let a = iue_areas(pred, target);
    let (i, u, e) = ([a.inter], [a.union], [a.enclose]);
    let v = ev.loss_and_grad(&Bindings::areas(&i, &u, &e), norm);
    let g = |leaf| ev.leaf_grad(leaf).first().copied().unwrap_or(0.0);
    let (gi, gu, ge) = (g(Leaf::Inter), g(Leaf::Union), g(Leaf::Enclose));
    let d = std::array::from_fn(|k| gi * a.d_inter[k] + gu * a.d_union[k] + ge * a.d_enclose[k]);
    (v, d)
}

/// Clamps to `[MIN_PROB, 1]` and renormalizes each pixel over channels.
fn project_simplex(x: &mut [f64], shape: Shape) {
    let hw = shape.h * shape.w;
    for b in 0..shape.n {
        let base = b * shape.c * hw;
        for p in 0..hw {
            let mut sum = 0.0;
            for c in 0..shape.c {
                let v = &mut x[base + c * hw + p];
                *v = v.clamp(MIN_PROB, 1.0);
                sum += *v;
            }
            for c in 0..shape.c {
                x[base + c * hw + p] /= sum;
            }
        }
    }
}

fn project_box(b: BoxF) -> BoxF {
    let mut b = b.canonical();
    for (lo, hi) in [(&mut b.x1, &mut b.x2), (&mut b.y1, &mut b.y2)] {
        if *hi - *lo < MIN_BOX_SIDE {
            let mid = 0.5 * (*lo + *hi);
            *lo = mid - 0.5 * MIN_BOX_SIDE;
            *hi = mid + 0.5 * MIN_BOX_SIDE;
        }
    }
    b
}

enum State {
    Dense { x: Vec<f64>, v: Vec<f64>, g: Vec<f64>, y: Vec<f64>, shape: Shape },
    Box { x: [f64; 4], v: [f64; 4], g: [f64; 4], target: BoxF },
}

/// Momentum descent of one sample's predictions on the summed loss.
fn descend(
    sample: &[BranchSample],
    loss: &MultiBranchLoss,
    weights: &[f64],
    cfg: &DescentConfig,
) -> (Vec<BranchSample>, usize) {
    let mut evals: Vec<GraphEvaluator> = loss
        .branches()
        .iter()
        .zip(sample)
        .map(|(b, s)| match s {
            BranchSample::Dense { yhat, .. } => GraphEvaluator::new(&b.body, yhat.shape()),
            BranchSample::Box { .. } => GraphEvaluator::new(&b.body, Shape::new(1, 1, 1, 1)),
        })
        .collect();
    if !evals.iter().any(GraphEvaluator::has_gradient_path) {
        return (sample.to_vec(), 0);
    }
    let mut states: Vec<State> = sample
        .iter()
        .map(|s| match s {
            BranchSample::Dense { yhat, y } => State::Dense {
                x: yhat.data().to_vec(),
                v: vec![0.0; yhat.shape().len()],
                g: vec![0.0; yhat.shape().len()],
                y: y.data().to_vec(),
                shape: yhat.shape(),
            },
            BranchSample::Box { pred, target } => {
                State::Box { x: pred.to_array(), v: [0.0; 4], g: [0.0; 4], target: *target }
            }
        })
        .collect();
    let mut steps = 0;
    'outer: for _ in 0..cfg.iterations {
        let mut total = 0.0;
        for ((ev, st), &w) in evals.iter_mut().zip(states.iter_mut()).zip(weights) {
            match st {
                State::Dense { x, g, y, .. } => {
                    total += w * ev.loss_and_grad(&Bindings::dense(x, y), Normalization::Sum);
                    let lg = ev.leaf_grad(Leaf::YHat);
                    if lg.is_empty() {
                        g.fill(0.0);
                    } else {
                        for (gi, &l) in g.iter_mut().zip(lg) {
                            *gi = w * l;
                        }
                    }
                    if !g.iter().all(|v| v.is_finite()) {
                        break 'outer;
                    }
                }
                State::Box { x, g, target, .. } => {
                    let (v, d) = box_loss_grad(ev, &BoxF::from_array(*x), target, Normalization::Sum);
                    total += w * v;
                    for k in 0..4 {
                        g[k] = w * d[k];
                    }
                    if !g.iter().all(|v| v.is_finite()) {
                        break 'outer;
                    }
                }
            }
        }
        if !total.is_finite() {
            break;
        }
        for st in states.iter_mut() {
            match st {
                State::Dense { x, v, g, shape, .. } => {
                    for ((xi, vi), &gi) in x.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                        *vi = cfg.momentum * *vi + gi;
                        *xi -= cfg.lr * *vi;
                    }
                    project_simplex(x, *shape);
                }
                State::Box { x, v, g, .. } => {
                    for k in 0..4 {
                        v[k] = cfg.momentum * v[k] + g[k];
                        x[k] -= cfg.lr * v[k];
                    }
                    *x = project_box(BoxF::from_array(*x)).to_array();
                }
            }
        }
        steps += 1;
    }
    let out = states
        .into_iter()
        .zip(sample)
        .map(|(st, s)| match (st, s) {
            (State::Dense { x, shape, .. }, BranchSample::Dense { y, .. }) => BranchSample::Dense {
                yhat: crate::tensor::Tensor4::from_vec(shape, x).expect("shape preserved"),
                y: y.clone(),
            },
            (State::Box { x, target, .. }, _) => BranchSample::Box { pred: BoxF::from_array(x), target },
            _ => unreachable!(),
        })
        .collect();
    (out, steps)
}

/// A gradient norm kept to two significant digits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundedNorm {
    Zero,
    /// `mantissa · 10^exponent` with `10 ≤ mantissa ≤ 99`.
    Digits { mantissa: u8, exponent: i16 },
    NonFinite,
}

impl RoundedNorm {
    /// Rounds half away from zero on the second significant digit.
    pub fn from_value(v: f64) -> Self {
        if !v.is_finite() {
            return RoundedNorm::NonFinite;
        }
        let v = v.abs();
        if v == 0.0 {
            return RoundedNorm::Zero;
        }
        let mut exponent = v.log10().floor() as i32 - 1;
        let mut scaled = v / 10f64.powi(exponent);
        // log10 can land one decade off near powers of ten
        if scaled >= 100.0 {
            exponent += 1;
            scaled = v / 10f64.powi(exponent);
        } else if scaled < 10.0 {
            exponent -= 1;
            scaled = v / 10f64.powi(exponent);
        }
        let mut mantissa = scaled.round();
        if mantissa >= 100.0 {
            mantissa = 10.0;
            exponent += 1;
        }
        if !(-30000..=30000).contains(&exponent) {
            return if exponent < 0 { RoundedNorm::Zero } else { RoundedNorm::NonFinite };
        }
        RoundedNorm::Digits { mantissa: mantissa as u8, exponent: exponent as i16 }
    }

    pub fn value(self) -> f64 {
        match self {
            RoundedNorm::Zero => 0.0,
            RoundedNorm::Digits { mantissa, exponent } => f64::from(mantissa) * 10f64.powi(i32::from(exponent)),
            RoundedNorm::NonFinite => f64::NAN,
        }
    }
}

impl fmt::Display for RoundedNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundedNorm::Zero => f.write_str("0"),
            RoundedNorm::Digits { mantissa, exponent } => {
                write!(f, "{}.{}e{}", mantissa / 10, mantissa % 10, exponent + 1)
            }
            RoundedNorm::NonFinite => f.write_str("nan"),
        }
    }
}

/// Rounded gradient norms, branch-major then sample order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    pub norms: Vec<RoundedNorm>,
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.norms.iter().map(RoundedNorm::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Fitness scores keyed by fingerprint. Safe to share between threads.
#[derive(Debug, Default)]
pub struct FingerprintCache {
    map: Mutex<HashMap<Fingerprint, f64>>,
}

impl FingerprintCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, fp: &Fingerprint) -> Option<f64> {
        self.map.lock().unwrap().get(fp).copied()
    }

    /// Stores `fitness` unless the fingerprint is already present; returns
    /// the value now held.
    pub fn insert(&self, fp: Fingerprint, fitness: f64) -> f64 {
        *self.map.lock().unwrap().entry(fp).or_insert(fitness)
    }

    /// Returns the cached value, or computes, stores and returns a new one.
    /// The second element is `true` on a hit.
    pub fn get_or_insert_with(&self, fp: &Fingerprint, f: impl FnOnce() -> f64) -> (f64, bool) {
        if let Some(v) = self.lookup(fp) {
            return (v, true);
        }
        let v = f();
        (self.insert(fp.clone(), v), false)
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
