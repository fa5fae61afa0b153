//! Forward evaluation and reverse-mode gradients of loss graphs.
//!
//! A graph is flattened into a postorder instruction list once; the
//! [`GraphEvaluator`] then owns one value buffer and one gradient buffer per
//! instruction and reuses them across calls, which matters for the rejection
//! protocol's 500-step descents.

use crate::error::{Error, Result};
use crate::tensor::{
    self, sign, BinaryKind, PoolMode, Reduction, Shape, Tensor4, UnaryKind, EPS,
};

use super::{InputKind, Kernel, Leaf, LossGraph, MultiBranchLoss, Node};

/// How the output tensor is reduced to a scalar loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `sum(o) / (N·H·W)`; the channel axis is summed, not averaged.
    PerPosition,
    /// Plain `sum(o)`, used when optimising predictions directly.
    Sum,
}

impl Normalization {
    pub fn scale(self, shape: Shape) -> f64 {
        match self {
            Normalization::PerPosition => 1.0 / shape.positions() as f64,
            Normalization::Sum => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Instr {
    Leaf(Leaf),
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    Pool(PoolMode, usize),
    Mean(Reduction, usize),
}

fn compile(node: &Node, out: &mut Vec<Instr>) -> usize {
    let instr = match node {
        Node::Leaf(l) => Instr::Leaf(*l),
        Node::Op(op, ch) => {
            let idx: Vec<usize> = ch.iter().map(|c| compile(c, out)).collect();
            match op.kernel() {
                Kernel::Unary(k) => Instr::Unary(k, idx[0]),
                Kernel::Binary(k) => Instr::Binary(k, idx[0], idx[1]),
                Kernel::Pool(m) => Instr::Pool(m, idx[0]),
                Kernel::Mean(r) => Instr::Mean(r, idx[0]),
            }
        }
    };
    out.push(instr);
    out.len() - 1
}

#[inline]
fn unary_derivative(op: UnaryKind, x: f64, y: f64) -> f64 {
    match op {
        UnaryKind::Neg => -1.0,
        UnaryKind::Abs => sign(x),
        UnaryKind::Inv => {
            let d = x + EPS;
            -1.0 / (d * d)
        }
        UnaryKind::Log => 1.0 / (x.abs() + EPS),
        UnaryKind::Exp => y,
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt => 0.5 / (x.abs() + EPS).sqrt(),
    }
}

/// Input tensors bound to the leaves of a graph, as flat slices.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bindings<'a> {
    slots: [Option<&'a [f64]>; Leaf::COUNT],
}

impl<'a> Bindings<'a> {
    pub fn dense(yhat: &'a [f64], y: &'a [f64]) -> Self {
        let mut b = Bindings::default();
        b.slots[Leaf::YHat.index()] = Some(yhat);
        b.slots[Leaf::Y.index()] = Some(y);
        b
    }

    pub fn areas(i: &'a [f64], u: &'a [f64], e: &'a [f64]) -> Self {
        let mut b = Bindings::default();
        b.slots[Leaf::Inter.index()] = Some(i);
        b.slots[Leaf::Union.index()] = Some(u);
        b.slots[Leaf::Enclose.index()] = Some(e);
        b
    }
}

/// Reusable evaluator for one graph at one tensor shape.
#[derive(Clone, Debug)]
pub struct GraphEvaluator {
    instrs: Vec<Instr>,
    needs_grad: Vec<bool>,
    shape: Shape,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    winners: Vec<Vec<u32>>,
    leaf_grads: Vec<Vec<f64>>,
}

impl GraphEvaluator {
    pub fn new(body: &Node, shape: Shape) -> Self {
        let mut instrs = Vec::with_capacity(body.node_count());
        compile(body, &mut instrs);
        let len = shape.len();
        let mut needs_grad = vec![false; instrs.len()];
        for (i, instr) in instrs.iter().enumerate() {
            needs_grad[i] = match *instr {
                Instr::Leaf(l) => l.depends_on_prediction(),
                Instr::Unary(_, c) | Instr::Pool(_, c) | Instr::Mean(_, c) => needs_grad[c],
                Instr::Binary(_, a, b) => needs_grad[a] || needs_grad[b],
            };
        }
        let values = instrs
            .iter()
            .map(|i| match i {
                Instr::Leaf(Leaf::One) => vec![1.0; len],
                _ => vec![0.0; len],
            })
            .collect();
        let grads = needs_grad.iter().map(|&g| if g { vec![0.0; len] } else { Vec::new() }).collect();
        let winners = instrs
            .iter()
            .map(|i| if matches!(i, Instr::Pool(..)) { vec![0u32; len] } else { Vec::new() })
            .collect();
        let mut leaf_grads = vec![Vec::new(); Leaf::COUNT];
        for i in &instrs {
            if let Instr::Leaf(l) = i {
                if l.depends_on_prediction() {
                    leaf_grads[l.index()] = vec![0.0; len];
                }
            }
        }
        GraphEvaluator { instrs, needs_grad, shape, values, grads, winners, leaf_grads }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Whether any leaf that depends on the prediction is reachable.
    pub fn has_gradient_path(&self) -> bool {
        self.needs_grad.last().copied().unwrap_or(false)
    }

    /// Runs the forward sweep and returns the output tensor `o`.
    pub fn forward(&mut self, inputs: &Bindings<'_>) -> &[f64] {
        let shape = self.shape;
        for i in 0..self.instrs.len() {
            let (lo, hi) = self.values.split_at_mut(i);
            let out = &mut hi[0];
            match self.instrs[i] {
                Instr::Leaf(Leaf::One) => {}
                Instr::Leaf(l) => {
                    let src = inputs.slots[l.index()]
                        .unwrap_or_else(|| panic!("leaf `{}` is not bound", l.name()));
                    out.copy_from_slice(src);
                }
                Instr::Unary(k, c) => tensor::unary_into(k, &lo[c], out),
                Instr::Binary(k, a, b) => tensor::binary_into(k, &lo[a], &lo[b], out),
                Instr::Pool(m, c) => tensor::pool3x3_into(shape, m, &lo[c], out, &mut self.winners[i]),
                Instr::Mean(r, c) => tensor::mean_into(shape, r, &lo[c], out),
            }
        }
        self.values.last().expect("graph has at least one node")
    }

    pub fn loss(&mut self, inputs: &Bindings<'_>, norm: Normalization) -> f64 {
        let scale = norm.scale(self.shape);
        self.forward(inputs).iter().sum::<f64>() * scale
    }

    /// Forward plus reverse sweep. Returns the loss; gradients with respect to
    /// prediction-dependent leaves are then available from [`leaf_grad`].
    ///
    /// [`leaf_grad`]: GraphEvaluator::leaf_grad
    pub fn loss_and_grad(&mut self, inputs: &Bindings<'_>, norm: Normalization) -> f64 {
        let loss = self.loss(inputs, norm);
        self.backward(norm.scale(self.shape));
        loss
    }

    /// Gradient w.r.t. `leaf` from the last [`loss_and_grad`] call; all
    /// zeros (or empty) when the leaf does not occur in the graph.
    ///
    /// [`loss_and_grad`]: GraphEvaluator::loss_and_grad
    pub fn leaf_grad(&self, leaf: Leaf) -> &[f64] {
        &self.leaf_grads[leaf.index()]
    }

    fn backward(&mut self, seed: f64) {
        for g in self.leaf_grads.iter_mut() {
            g.fill(0.0);
        }
        let root = self.instrs.len() - 1;
        if !self.needs_grad[root] {
            return;
        }
        for (g, &needed) in self.grads.iter_mut().zip(&self.needs_grad) {
            if needed {
                g.fill(0.0);
            }
        }
        self.grads[root].fill(seed);
        let shape = self.shape;
        for i in (0..self.instrs.len()).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let (glo, ghi) = self.grads.split_at_mut(i);
            let g = &ghi[0];
            let vals = &self.values;
            match self.instrs[i] {
                Instr::Leaf(l) => {
                    for (acc, &v) in self.leaf_grads[l.index()].iter_mut().zip(g) {
                        *acc += v;
                    }
                }
                Instr::Unary(k, c) => {
                    let x = &vals[c];
                    let y = &vals[i];
                    for (((acc, &gv), &xv), &yv) in glo[c].iter_mut().zip(g).zip(x).zip(y) {
                        *acc += gv * unary_derivative(k, xv, yv);
                    }
                }
                Instr::Binary(k, a, b) => {
                    for (child, other) in [(a, b), (b, a)] {
                        if !self.needs_grad[child] {
                            continue;
                        }
                        let acc = &mut glo[child];
                        match k {
                            BinaryKind::Add => {
                                for (s, &gv) in acc.iter_mut().zip(g) {
                                    *s += gv;
                                }
                            }
                            BinaryKind::Mul => {
                                for ((s, &gv), &ov) in acc.iter_mut().zip(g).zip(&vals[other]) {
                                    *s += gv * ov;
                                }
                            }
                        }
                    }
                }
                Instr::Pool(_, c) => {
                    let acc = &mut glo[c];
                    for (&gv, &w) in g.iter().zip(&self.winners[i]) {
                        acc[w as usize] += gv;
                    }
                }
                Instr::Mean(r, c) => mean_backward(shape, r, g, &mut glo[c]),
            }
        }
    }
}

fn mean_backward(shape: Shape, r: Reduction, g: &[f64], acc: &mut [f64]) {
    let Shape { n, c, h, w } = shape;
    let hw = h * w;
    match r {
        Reduction::MeanNhw => {
            let denom = (n * hw) as f64;
            for ch in 0..c {
                let mut total = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    total += g[base..base + hw].iter().sum::<f64>();
                }
                let share = total / denom;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    acc[base..base + hw].iter_mut().for_each(|v| *v += share);
                }
            }
        }
        Reduction::MeanC => {
            let denom = c as f64;
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let total: f64 = (0..c).map(|ch| g[base + ch * hw + p]).sum();
                    let share = total / denom;
                    for ch in 0..c {
                        acc[base + ch * hw + p] += share;
                    }
                }
            }
        }
    }
}

fn dense_check(g: &LossGraph, yhat: &Tensor4, y: &Tensor4) -> Result<()> {
    if g.inputs != InputKind::Dense {
        return Err(Error::Config(format!("branch `{}` reads box areas, not (yhat, y)", g.name)));
    }
    if yhat.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "prediction {} and target {} differ",
            yhat.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Output tensor `o` of a dense branch.
pub fn eval_output(g: &LossGraph, yhat: &Tensor4, y: &Tensor4) -> Result<Tensor4> {
    dense_check(g, yhat, y)?;
    let mut ev = GraphEvaluator::new(&g.body, yhat.shape());
    let out = ev.forward(&Bindings::dense(yhat.data(), y.data())).to_vec();
    Tensor4::from_vec(yhat.shape(), out)
}

/// `sum(o) / (N·H·W)`.
pub fn loss_value(g: &LossGraph, yhat: &Tensor4, y: &Tensor4) -> Result<f64> {
    dense_check(g, yhat, y)?;
    let mut ev = GraphEvaluator::new(&g.body, yhat.shape());
    Ok(ev.loss(&Bindings::dense(yhat.data(), y.data()), Normalization::PerPosition))
}

/// Gradient of [`loss_value`] with respect to the prediction.
pub fn grad_wrt_prediction(g: &LossGraph, yhat: &Tensor4, y: &Tensor4) -> Result<Tensor4> {
    dense_check(g, yhat, y)?;
    let mut ev = GraphEvaluator::new(&g.body, yhat.shape());
    ev.loss_and_grad(&Bindings::dense(yhat.data(), y.data()), Normalization::PerPosition);
    let grad = if g.body.contains_leaf(Leaf::YHat) {
        ev.leaf_grad(Leaf::YHat).to_vec()
    } else {
        vec![0.0; yhat.shape().len()]
    };
    Tensor4::from_vec(yhat.shape(), grad)
}

/// Tensors feeding one branch.
#[derive(Clone, Copy, Debug)]
pub enum BranchInput<'a> {
    Dense { yhat: &'a Tensor4, y: &'a Tensor4 },
    Areas { i: &'a Tensor4, u: &'a Tensor4, e: &'a Tensor4 },
}

/// Weighted sum of branch losses. `inputs` is keyed by branch name;
/// `weights` defaults to 1.0 per branch.
pub fn total_loss(
    loss: &MultiBranchLoss,
    inputs: &[(&str, BranchInput<'_>)],
    weights: Option<&[f64]>,
) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != loss.len() {
            return Err(Error::Config(format!(
                "{} weights for {} branches",
                w.len(),
                loss.len()
            )));
        }
    }
    let mut total = 0.0;
    for (k, branch) in loss.branches().iter().enumerate() {
        let input = inputs
            .iter()
            .find(|(name, _)| *name == branch.name)
            .map(|(_, i)| *i)
            .ok_or_else(|| Error::Config(format!("no input for branch `{}`", branch.name)))?;
        let value = match input {
            BranchInput::Dense { yhat, y } => loss_value(branch, yhat, y)?,
            BranchInput::Areas { i, u, e } => {
                if branch.inputs != InputKind::Areas {
                    return Err(Error::Config(format!("branch `{}` expects dense inputs", branch.name)));
                }
                if i.shape() != u.shape() || i.shape() != e.shape() {
                    return Err(Error::Shape("area tensors differ in shape".into()));
                }
                let mut ev = GraphEvaluator::new(&branch.body, i.shape());
                ev.loss(&Bindings::areas(i.data(), u.data(), e.data()), Normalization::PerPosition)
            }
        };
        total += weights.map_or(1.0, |w| w[k]) * value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_formula, random_graph, Op};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(text: &str) -> LossGraph {
        LossGraph::from_formula("g", text).unwrap()
    }

    fn t(shape: Shape, data: Vec<f64>) -> Tensor4 {
        Tensor4::from_vec(shape, data).unwrap()
    }

    /// Tree-walking reference built on the pure tensor kernels.
    fn reference_output(node: &Node, yhat: &Tensor4, y: &Tensor4) -> Tensor4 {
        match node {
            Node::Leaf(Leaf::Y) => y.clone(),
            Node::Leaf(Leaf::YHat) => yhat.clone(),
            Node::Leaf(Leaf::One) => Tensor4::ones(y.shape()),
            Node::Leaf(_) => unreachable!(),
            Node::Op(op, ch) => {
                let a = reference_output(&ch[0], yhat, y);
                match op.kernel() {
                    Kernel::Unary(k) => a.map_unary(k),
                    Kernel::Binary(k) => a.map_binary(&reference_output(&ch[1], yhat, y), k).unwrap(),
                    Kernel::Pool(m) => a.pool3x3(m),
                    Kernel::Mean(r) => a.aggregate(r),
                }
            }
        }
    }

    #[test]
    fn leaf_graph_is_identity() {
        let s = Shape::new(1, 2, 2, 1);
        let yhat = t(s, vec![0.1, 0.2, 0.3, 0.4]);
        let y = t(s, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(eval_output(&graph("yhat"), &yhat, &y).unwrap(), yhat);
    }

    #[test]
    fn cross_entropy_output() {
        let s = Shape::new(1, 2, 1, 1);
        let y = t(s, vec![1.0, 0.0]);
        let yhat = t(s, vec![0.5, 0.5]);
        let o = eval_output(&graph("mul(neg(y), log(yhat))"), &yhat, &y).unwrap();
        assert!((o.data()[0] - 0.5f64.ln().abs()).abs() < 1e-6);
        assert!(o.data()[1].abs() < 1e-12);
    }

    #[test]
    fn channel_axis_is_not_normalised() {
        let one = graph("one");
        let s = Shape::new(1, 2, 1, 1);
        let z = Tensor4::zeros(s);
        assert_eq!(loss_value(&one, &z, &z).unwrap(), 2.0);
        let s = Shape::new(2, 1, 3, 3);
        let z = Tensor4::zeros(s);
        assert_eq!(loss_value(&one, &z, &z).unwrap(), 1.0);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = Shape::new(3, 4, 2, 2);
        let mut yhat = Tensor4::zeros(s);
        let mut y = Tensor4::zeros(s);
        let mut expected = 0.0;
        for n in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
                    let class = rng.random_range(0..4);
                    for c in 0..4 {
                        yhat.set(n, c, h, w, logits[c].exp() / z);
                    }
                    y.set(n, class, h, w, 1.0);
                    expected -= (logits[class].exp() / z).ln();
                }
            }
        }
        expected /= 12.0;
        let got = loss_value(&graph("neg(mul(y, log(yhat)))"), &yhat, &y).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn gradient_of_leaf_and_of_target_only_graph() {
        let s = Shape::new(1, 1, 2, 2);
        let yhat = Tensor4::filled(s, 0.3);
        let y = Tensor4::filled(s, 0.7);
        let g = grad_wrt_prediction(&graph("yhat"), &yhat, &y).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.25));
        let g = grad_wrt_prediction(&graph("exp(y)"), &yhat, &y).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_reference_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let depth = rng.random_range(1..=4);
            let g = random_graph("g", InputKind::Dense, depth, &mut rng);
            let s = Shape::new(2, 3, 3, 4);
            let yhat = t(s, (0..s.len()).map(|_| rng.random_range(0.1..0.9)).collect());
            let y = t(s, (0..s.len()).map(|_| rng.random_range(0.0..1.0)).collect());
            let ours = eval_output(&g, &yhat, &y).unwrap();
            let reference = reference_output(&g.body, &yhat, &y);
            for (a, b) in ours.data().iter().zip(reference.data()) {
                assert!(a == b || (a.is_nan() && b.is_nan()), "{}: {a} vs {b}", g.formula());
            }
        }
    }

    #[test]
    fn evaluator_reuse_is_deterministic() {
        let node = parse_formula("add(max_pool(mul(yhat, y)), mean_c(square(yhat)))").unwrap();
        let s = Shape::new(1, 3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let yhat: Vec<f64> = (0..s.len()).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..s.len()).map(|_| rng.random()).collect();
        let mut ev = GraphEvaluator::new(&node, s);
        let b = Bindings::dense(&yhat, &y);
        let l1 = ev.loss_and_grad(&b, Normalization::Sum);
        let g1 = ev.leaf_grad(Leaf::YHat).to_vec();
        let l2 = ev.loss_and_grad(&b, Normalization::Sum);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, ev.leaf_grad(Leaf::YHat));
    }

    #[test]
    fn pooling_gradient_goes_to_first_winner() {
        let node = Node::unary(Op::MaxPool, Node::leaf(Leaf::YHat));
        let s = Shape::new(1, 1, 1, 3);
        let yhat = [2.0, 2.0, 1.0];
        let y = [0.0; 3];
        let mut ev = GraphEvaluator::new(&node, s);
        ev.loss_and_grad(&Bindings::dense(&yhat, &y), Normalization::Sum);
        // windows: {0,1} -> 0, {0,1,2} -> 0, {1,2} -> 1
        assert_eq!(ev.leaf_grad(Leaf::YHat), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn total_loss_sums_weighted_branches() {
        let loss = MultiBranchLoss::parse("a=yhat; b=mul(i, e)", "x").unwrap();
        let s = Shape::new(1, 1, 1, 1);
        let yhat = Tensor4::filled(s, 0.3);
        let y = Tensor4::zeros(s);
        let i = Tensor4::filled(s, 0.5);
        let u = Tensor4::filled(s, 1.0);
        let e = Tensor4::filled(s, 1.4);
        let inputs = [
            ("a", BranchInput::Dense { yhat: &yhat, y: &y }),
            ("b", BranchInput::Areas { i: &i, u: &u, e: &e }),
        ];
        let plain = total_loss(&loss, &inputs, None).unwrap();
        assert!((plain - 1.0).abs() < 1e-12);
        let weighted = total_loss(&loss, &inputs, Some(&[1.0, 10.0])).unwrap();
        assert!((weighted - 7.3).abs() < 1e-12);
        assert!(matches!(total_loss(&loss, &inputs[..1], None), Err(Error::Config(_))));
    }
}
