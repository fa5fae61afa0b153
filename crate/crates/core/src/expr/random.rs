use rand::Rng;

use super::{InputKind, Leaf, LossGraph, Node, Op};

/// Uniform draw over the fourteen primitive operators.
pub fn sample_op<R: Rng + ?Sized>(rng: &mut R) -> Op {
    Op::ALL[rng.random_range(0..Op::ALL.len())]
}

/// Uniform draw (with replacement) over the input leaves of a branch.
pub fn sample_leaf<R: Rng + ?Sized>(inputs: InputKind, rng: &mut R) -> Leaf {
    let leaves = inputs.leaves();
    leaves[rng.random_range(0..leaves.len())]
}

/// Full tree with exactly `depth` operator nodes on every path.
pub fn random_node<R: Rng + ?Sized>(inputs: InputKind, depth: usize, rng: &mut R) -> Node {
    if depth == 0 {
        return Node::Leaf(sample_leaf(inputs, rng));
    }
    let op = sample_op(rng);
    let children = (0..op.arity()).map(|_| random_node(inputs, depth - 1, rng)).collect();
    Node::Op(op, children)
}

pub fn random_graph<R: Rng + ?Sized>(
    name: impl Into<String>,
    inputs: InputKind,
    depth: usize,
    rng: &mut R,
) -> LossGraph {
    assert!(depth >= 1, "random graphs need at least one operator per path");
    LossGraph { name: name.into(), inputs, body: random_node(inputs, depth, rng) }
}
