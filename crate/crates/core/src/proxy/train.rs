use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BranchSample, Example, Predictor, ProxyTask, Target, TaskKind, EARLY_STOP_WINDOW};
use crate::error::{Error, Result};
use crate::expr::{Bindings, GraphEvaluator, Leaf, MultiBranchLoss, Normalization};
use crate::metrics::{box_regression_score, detection_hit, iue_areas, Areas, BoxF};
use crate::tensor::{Shape, Tensor4};

/// Reference box the regression head is relative to: centred on the unit
/// canvas with side `BOX_ANCHOR`.
const BOX_ANCHOR: f64 = 0.15;
const BOX_CENTER_SCALE: f64 = 0.25;

/// Raw head outputs `(a0, a1, a2, a3)` → box centred at `0.5 + s·(a0, a1)`
/// with sides `anchor · exp(a2, a3)`.
pub(crate) fn decode_box(a: &[f64]) -> BoxF {
    let cx = 0.5 + BOX_CENTER_SCALE * a[0];
    let cy = 0.5 + BOX_CENTER_SCALE * a[1];
    let w = BOX_ANCHOR * a[2].exp();
    let h = BOX_ANCHOR * a[3].exp();
    BoxF::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Pulls `∂L/∂(x1, y1, x2, y2)` back to the raw head outputs.
fn decode_box_backward(a: &[f64], d: [f64; 4], out: &mut [f64]) {
    out[0] = BOX_CENTER_SCALE * (d[0] + d[2]);
    out[1] = BOX_CENTER_SCALE * (d[1] + d[3]);
    out[2] = 0.5 * (d[2] - d[0]) * BOX_ANCHOR * a[2].exp();
    out[3] = 0.5 * (d[3] - d[1]) * BOX_ANCHOR * a[3].exp();
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Scratch buffers reused across iterations.
#[derive(Default)]
pub(crate) struct Workspace {
    x: Vec<f64>,
    hid: Vec<f64>,
    out: Vec<f64>,
    dout: Vec<f64>,
    dh: Vec<f64>,
    probs: Vec<f64>,
    y: Vec<f64>,
    i: Vec<f64>,
    u: Vec<f64>,
    e: Vec<f64>,
    areas: Vec<Areas>,
    row: Vec<f64>,
}

/// Rows of predictor input for `examples`, concatenated.
fn gather(task: &ProxyTask, examples: &[&Example], x: &mut Vec<f64>) -> usize {
    x.clear();
    for ex in examples {
        x.extend_from_slice(&ex.features);
    }
    x.len() / task.feature_dim
}

/// Per-pixel softmax of `rows × c` logits into an `(n, c, h, w)` buffer.
fn seg_probs(out: &[f64], n: usize, c: usize, hw: usize, probs: &mut Vec<f64>, row: &mut Vec<f64>) {
    probs.resize(n * c * hw, 0.0);
    row.resize(c, 0.0);
    for b in 0..n {
        for p in 0..hw {
            let r = b * hw + p;
            softmax_into(&out[r * c..(r + 1) * c], row);
            for (k, &v) in row.iter().enumerate() {
                probs[(b * c + k) * hw + p] = v;
            }
        }
    }
}

fn one_hot_into(labels: &[usize], c: usize, dst: &mut [f64]) {
    let hw = labels.len();
    dst.fill(0.0);
    for (p, &l) in labels.iter().enumerate() {
        dst[l * hw + p] = 1.0;
    }
    debug_assert_eq!(dst.len(), c * hw);
}

pub(crate) fn predict_one(task: &ProxyTask, pred: &Predictor, ex: &Example, ws: &mut Workspace) -> Vec<BranchSample> {
    let rows = gather(task, &[ex], &mut ws.x);
    pred.forward(&ws.x, rows, &mut ws.hid, &mut ws.out);
    let c = task.classes;
    match (&ex.target, task.kind) {
        (Target::Labels(labels), TaskKind::Seg) => {
            let hw = labels.len();
            seg_probs(&ws.out, 1, c, hw, &mut ws.probs, &mut ws.row);
            let shape = Shape::new(1, c, task.side, task.side);
            let mut y = vec![0.0; c * hw];
            one_hot_into(labels, c, &mut y);
            vec![BranchSample::Dense {
                yhat: Tensor4::from_vec(shape, ws.probs.clone()).unwrap(),
                y: Tensor4::from_vec(shape, y).unwrap(),
            }]
        }
        (Target::Box(t), TaskKind::Box) => vec![BranchSample::Box { pred: decode_box(&ws.out), target: *t }],
        (Target::Det { class, bbox }, TaskKind::Det) => {
            let shape = Shape::new(1, c, 1, 1);
            let mut probs = vec![0.0; c];
            softmax_into(&ws.out[..c], &mut probs);
            let mut y = vec![0.0; c];
            y[*class] = 1.0;
            vec![
                BranchSample::Dense {
                    yhat: Tensor4::from_vec(shape, probs).unwrap(),
                    y: Tensor4::from_vec(shape, y).unwrap(),
                },
                BranchSample::Box { pred: decode_box(&ws.out[c..c + 4]), target: *bbox },
            ]
        }
        _ => panic!("example target does not match task kind"),
    }
}

/// Metric of `pred` over the eval split, pooled over all examples.
pub(crate) fn eval_score(task: &ProxyTask, pred: &Predictor) -> Result<f64> {
    let mut ws = Workspace::default();
    let refs: Vec<&Example> = task.eval.iter().collect();
    let rows = gather(task, &refs, &mut ws.x);
    pred.forward(&ws.x, rows, &mut ws.hid, &mut ws.out);
    let c = task.classes;
    match task.kind {
        TaskKind::Seg => {
            let hw = task.side * task.side;
            let n = refs.len();
            seg_probs(&ws.out, n, c, hw, &mut ws.probs, &mut ws.row);
            let mut y = vec![0.0; n * c * hw];
            for (b, ex) in refs.iter().enumerate() {
                let Target::Labels(labels) = &ex.target else { unreachable!() };
                one_hot_into(labels, c, &mut y[b * c * hw..(b + 1) * c * hw]);
            }
            let shape = Shape::new(n, c, task.side, task.side);
            task.metric.score_dense(&Tensor4::from_vec(shape, ws.probs.clone())?, &Tensor4::from_vec(shape, y)?)
        }
        TaskKind::Box => {
            let preds: Vec<BoxF> = (0..rows).map(|r| decode_box(&ws.out[r * 4..r * 4 + 4])).collect();
            let targets: Vec<BoxF> = refs
                .iter()
                .map(|ex| match ex.target {
                    Target::Box(b) => b,
                    _ => unreachable!(),
                })
                .collect();
            box_regression_score(&preds, &targets)
        }
        TaskKind::Det => {
            let no = c + 4;
            let mut probs = vec![0.0; c];
            let mut hits = 0usize;
            for (r, ex) in refs.iter().enumerate() {
                let Target::Det { class, bbox } = ex.target else { unreachable!() };
                let o = &ws.out[r * no..(r + 1) * no];
                softmax_into(&o[..c], &mut probs);
                hits += usize::from(detection_hit(&probs, class, &decode_box(&o[c..]), &bbox));
            }
            Ok(hits as f64 / rows as f64)
        }
    }
}

/// Loss evaluators for one batch size.
struct BatchLoss {
    evals: Vec<GraphEvaluator>,
    weights: Vec<f64>,
}

impl BatchLoss {
    fn new(task: &ProxyTask, loss: &MultiBranchLoss, n: usize) -> Self {
        let shapes: Vec<Shape> = match task.kind {
            TaskKind::Seg => vec![Shape::new(n, task.classes, task.side, task.side)],
            TaskKind::Box => vec![Shape::new(n, 1, 1, 1)],
            TaskKind::Det => vec![Shape::new(n, task.classes, 1, 1), Shape::new(n, 1, 1, 1)],
        };
        let evals = loss.branches().iter().zip(shapes).map(|(b, s)| GraphEvaluator::new(&b.body, s)).collect();
        BatchLoss { evals, weights: task.branch_weights() }
    }
}

fn leaf_grad_or_zero(ev: &GraphEvaluator, leaf: Leaf, k: usize) -> f64 {
    ev.leaf_grad(leaf).get(k).copied().unwrap_or(0.0)
}

/// Fills `ws.i/u/e/areas` for the decoded boxes in `out` (stride `no`,
/// offset `off`) against `targets`.
fn box_areas(ws: &mut Workspace, no: usize, off: usize, targets: &[BoxF]) {
    ws.areas.clear();
    ws.i.clear();
    ws.u.clear();
    ws.e.clear();
    for (r, t) in targets.iter().enumerate() {
        let a = iue_areas(&decode_box(&ws.out[r * no + off..r * no + off + 4]), t);
        ws.i.push(a.inter);
        ws.u.push(a.union);
        ws.e.push(a.enclose);
        ws.areas.push(a);
    }
}

/// Pulls area-leaf gradients back to the raw box outputs in `ws.dout`.
fn box_backward(ws: &mut Workspace, ev: &GraphEvaluator, weight: f64, no: usize, off: usize) {
    for (r, a) in ws.areas.iter().enumerate() {
        let (gi, gu, ge) = (
            leaf_grad_or_zero(ev, Leaf::Inter, r),
            leaf_grad_or_zero(ev, Leaf::Union, r),
            leaf_grad_or_zero(ev, Leaf::Enclose, r),
        );
        let mut d = [0.0; 4];
        for k in 0..4 {
            d[k] = weight * (gi * a.d_inter[k] + gu * a.d_union[k] + ge * a.d_enclose[k]);
        }
        let base = r * no + off;
        let raw = [ws.out[base], ws.out[base + 1], ws.out[base + 2], ws.out[base + 3]];
        decode_box_backward(&raw, d, &mut ws.dout[base..base + 4]);
    }
}

/// Softmax backward of dense-leaf gradient `g` (laid out `(n, c, hw)`) into
/// the logit rows of `ws.dout` (stride `no`).
fn softmax_backward(ws: &mut Workspace, g: &[f64], weight: f64, n: usize, c: usize, hw: usize, no: usize) {
    for b in 0..n {
        for p in 0..hw {
            let idx = |k: usize| (b * c + k) * hw + p;
            let s: f64 = (0..c).map(|k| ws.probs[idx(k)] * g[idx(k)]).sum();
            let r = b * hw + p;
            for k in 0..c {
                ws.dout[r * no + k] = weight * ws.probs[idx(k)] * (g[idx(k)] - s);
            }
        }
    }
}

/// Loss and parameter gradient on one batch.
fn batch_grad(
    task: &ProxyTask,
    pred: &Predictor,
    batch: &[&Example],
    bl: &mut BatchLoss,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let rows = gather(task, batch, &mut ws.x);
    pred.forward(&ws.x, rows, &mut ws.hid, &mut ws.out);
    let n = batch.len();
    let c = task.classes;
    let no = pred.outputs;
    ws.dout.clear();
    ws.dout.resize(rows * no, 0.0);
    let norm = Normalization::PerPosition;
    let value = match task.kind {
        TaskKind::Seg => {
            let hw = task.side * task.side;
            seg_probs(&ws.out, n, c, hw, &mut ws.probs, &mut ws.row);
            ws.y.resize(n * c * hw, 0.0);
            for (b, ex) in batch.iter().enumerate() {
                let Target::Labels(labels) = &ex.target else { unreachable!() };
                one_hot_into(labels, c, &mut ws.y[b * c * hw..(b + 1) * c * hw]);
            }
            let ev = &mut bl.evals[0];
            let v = ev.loss_and_grad(&Bindings::dense(&ws.probs, &ws.y), norm);
            let g = ev.leaf_grad(Leaf::YHat).to_vec();
            if !g.is_empty() {
                softmax_backward(ws, &g, 1.0, n, c, hw, no);
            }
            v
        }
        TaskKind::Box => {
            let targets: Vec<BoxF> = batch
                .iter()
                .map(|ex| match ex.target {
                    Target::Box(b) => b,
                    _ => unreachable!(),
                })
                .collect();
            box_areas(ws, no, 0, &targets);
            let ev = &mut bl.evals[0];
            let v = ev.loss_and_grad(&Bindings::areas(&ws.i, &ws.u, &ws.e), norm);
            box_backward(ws, ev, 1.0, no, 0);
            v
        }
        TaskKind::Det => {
            ws.probs.resize(n * c, 0.0);
            ws.y.clear();
            ws.y.resize(n * c, 0.0);
            let mut targets = Vec::with_capacity(n);
            for (b, ex) in batch.iter().enumerate() {
                let Target::Det { class, bbox } = ex.target else { unreachable!() };
                softmax_into(&ws.out[b * no..b * no + c], &mut ws.probs[b * c..(b + 1) * c]);
                ws.y[b * c + class] = 1.0;
                targets.push(bbox);
            }
            let (w_cls, w_reg) = (bl.weights[0], bl.weights[1]);
            let (cls, reg) = bl.evals.split_at_mut(1);
            let v_cls = cls[0].loss_and_grad(&Bindings::dense(&ws.probs, &ws.y), norm);
            let g = cls[0].leaf_grad(Leaf::YHat).to_vec();
            if !g.is_empty() {
                softmax_backward(ws, &g, w_cls, n, c, 1, no);
            }
            box_areas(ws, no, c, &targets);
            let v_reg = reg[0].loss_and_grad(&Bindings::areas(&ws.i, &ws.u, &ws.e), norm);
            box_backward(ws, &reg[0], w_reg, no, c);
            w_cls * v_cls + w_reg * v_reg
        }
    };
    pred.backward(&ws.x, rows, &ws.hid, &ws.dout, grad, &mut ws.dh);
    value
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Eval-split metric, or 0 if training hit a non-finite value.
    pub fitness: f64,
    pub iterations: usize,
    /// First iteration with a non-finite loss or gradient.
    pub non_finite_at: Option<usize>,
    /// Whether training stopped before its iteration budget.
    pub aborted: bool,
}

/// [`train_and_score_with`] with the invalid-loss early stop enabled.
pub fn train_and_score(task: &ProxyTask, loss: &MultiBranchLoss, seed: u64) -> Result<TrainOutcome> {
    train_and_score_with(task, loss, seed, true)
}

/// Trains a freshly initialized predictor on `task.train` with `loss` and
/// scores it on `task.eval`.
///
/// Any non-finite loss or gradient makes the fitness 0. With `early_stop`
/// training stops at that point; without it the remaining iterations still
/// run.
pub fn train_and_score_with(
    task: &ProxyTask,
    loss: &MultiBranchLoss,
    seed: u64,
    early_stop: bool,
) -> Result<TrainOutcome> {
    task.check_loss(loss)?;
    if task.train.is_empty() || task.eval.is_empty() {
        return Err(Error::Config("task has an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = task.init_predictor(&mut rng);
    let cfg = &task.trainer;
    let bs = cfg.batch_size.clamp(1, task.train.len());
    let mut bl = BatchLoss::new(task, loss, bs);
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; pred.params.len()];
    let mut velocity = vec![0.0; pred.params.len()];
    let mut non_finite_at = None;
    for it in 0..cfg.iterations {
        let batch: Vec<&Example> = index::sample(&mut rng, task.train.len(), bs).into_iter().map(|k| &task.train[k]).collect();
        let value = batch_grad(task, &pred, &batch, &mut bl, &mut ws, &mut grad);
        if non_finite_at.is_none() && !(value.is_finite() && grad.iter().all(|g| g.is_finite())) {
            non_finite_at = Some(it);
            if early_stop {
                if it < EARLY_STOP_WINDOW {
                    log::debug!("invalid loss at iteration {it}, stopping early");
                }
                return Ok(TrainOutcome { fitness: 0.0, iterations: it + 1, non_finite_at, aborted: true });
            }
        }
        for ((p, v), g) in pred.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
    }
    let fitness = if non_finite_at.is_some() || !pred.is_finite() { 0.0 } else { eval_score(task, &pred)? };
    Ok(TrainOutcome { fitness, iterations: cfg.iterations, non_finite_at, aborted: false })
}

/// Eval-split metric of an untrained predictor drawn from `seed`.
pub fn untrained_score(task: &ProxyTask, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eval_score(task, &task.init_predictor(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::{generate_box_task, generate_detection_task, generate_segmentation_task};
    use rand::Rng;

    fn loss(text: &str) -> MultiBranchLoss {
        MultiBranchLoss::parse(text, "loss").unwrap()
    }

    #[test]
    fn decode_box_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let mut an = [0.0; 4];
            decode_box_backward(&a, d, &mut an);
            for k in 0..4 {
                let f = |delta: f64| {
                    let mut b = a.clone();
                    b[k] += delta;
                    let bx = decode_box(&b).to_array();
                    (0..4).map(|j| d[j] * bx[j]).sum::<f64>()
                };
                let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
                assert!((fd - an[k]).abs() < 1e-6, "{fd} vs {}", an[k]);
            }
        }
    }

    /// End-to-end `∂L/∂ω` on a 10-parameter predictor against central
    /// differences, for each task kind.
    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cases = [
            (generate_segmentation_task(2, 20, 8, 5).unwrap(), loss("neg(mul(y, log(yhat)))")),
            (generate_box_task(20, 5).unwrap(), loss("neg(log(mul(i, inv(e))))")),
            (generate_detection_task(2, 20, 5).unwrap(), loss("cls=neg(mul(y, log(yhat))); reg=mul(e, inv(add(i, u)))")),
        ];
        for (mut task, l) in cases {
            // shrink to roughly ten parameters
            task.feature_dim = 1;
            task.hidden = 1;
            for ex in task.train.iter_mut() {
                let keep = match ex.target {
                    Target::Labels(ref lab) => lab.len(),
                    _ => 1,
                };
                let stride = ex.features.len() / keep;
                ex.features = (0..keep).map(|r| ex.features[r * stride]).collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut pred = task.init_predictor(&mut rng);
            pred.params.iter_mut().for_each(|p| *p = rng.random_range(-0.8..0.8));
            assert!(pred.params.len() <= 14);
            let batch: Vec<&Example> = task.train.iter().take(4).collect();
            let mut bl = BatchLoss::new(&task, &l, batch.len());
            let mut ws = Workspace::default();
            let mut grad = vec![0.0; pred.params.len()];
            batch_grad(&task, &pred, &batch, &mut bl, &mut ws, &mut grad);
            let mut scratch = vec![0.0; grad.len()];
            for k in 0..pred.params.len() {
                let h = 1e-6;
                let mut f = |delta: f64| {
                    let mut p = pred.clone();
                    p.params[k] += delta;
                    batch_grad(&task, &p, &batch, &mut bl, &mut ws, &mut scratch)
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
                assert!(rel < 1e-3 || (fd - grad[k]).abs() < 1e-8, "{:?} param {k}: {fd} vs {}", task.kind, grad[k]);
            }
        }
    }

    #[test]
    fn constant_loss_leaves_predictor_untrained() {
        let task = generate_segmentation_task(4, 20, 8, 3).unwrap();
        let out = train_and_score(&task, &loss("add(y, one)"), 11).unwrap();
        assert_eq!(out.fitness, untrained_score(&task, 11).unwrap());
        let task = generate_box_task(40, 3).unwrap();
        let constant = MultiBranchLoss::single(
            crate::expr::LossGraph::new("reg", crate::expr::InputKind::Areas, crate::expr::Node::Leaf(Leaf::One)).unwrap(),
        );
        let out = train_and_score(&task, &constant, 11).unwrap();
        assert_eq!(out.fitness, untrained_score(&task, 11).unwrap());
    }

    #[test]
    fn overflowing_loss_stops_early_with_zero_fitness() {
        let task = generate_segmentation_task(4, 20, 8, 3).unwrap();
        let l = loss("exp(exp(exp(exp(inv(add(yhat, neg(yhat)))))))");
        let out = train_and_score(&task, &l, 1).unwrap();
        assert_eq!(out.fitness, 0.0);
        assert!(out.aborted && out.non_finite_at.unwrap() < EARLY_STOP_WINDOW);
        let slow = train_and_score_with(&task, &l, 1, false).unwrap();
        assert_eq!(slow.fitness, 0.0);
        assert!(!slow.aborted);
    }

    #[test]
    fn training_is_deterministic() {
        let task = generate_segmentation_task(4, 20, 8, 3).unwrap();
        let l = loss("neg(mul(y, log(yhat)))");
        assert_eq!(train_and_score(&task, &l, 5).unwrap(), train_and_score(&task, &l, 5).unwrap());
    }

    #[test]
    fn mismatched_loss_is_rejected() {
        let task = generate_detection_task(3, 20, 3).unwrap();
        assert!(train_and_score(&task, &loss("neg(mul(y, log(yhat)))"), 0).is_err());
        assert!(train_and_score(&task, &loss("a=e; b=yhat"), 0).is_err());
    }
}
