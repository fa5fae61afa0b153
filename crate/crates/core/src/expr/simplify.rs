use super::{Leaf, LossGraph, Node, Op};

/// True when the subtree cannot produce a negative value for any input.
fn nonnegative(node: &Node) -> bool {
    match node {
        Node::Leaf(Leaf::One) => true,
        Node::Leaf(_) => false,
        Node::Op(op, ch) => match op {
            Op::Square | Op::Abs | Op::Exp => true,
            Op::Sqrt
            | Op::Inv
            | Op::Tanh
            | Op::MeanNhw
            | Op::MeanC
            | Op::MaxPool
            | Op::MinPool => nonnegative(&ch[0]),
            Op::Add | Op::Mul => nonnegative(&ch[0]) && nonnegative(&ch[1]),
            Op::Neg | Op::Log => false,
        },
    }
}

/// One local rewrite at the top of `node`, if any applies.
fn rewrite(node: Node) -> (Node, bool) {
    match node {
        Node::Op(Op::Square, mut ch) if ch[0] == Node::Leaf(Leaf::One) => {
            (ch.pop().expect("unary"), true)
        }
        Node::Op(Op::Neg, mut ch) if matches!(&ch[0], Node::Op(Op::Neg, _)) => {
            match ch.pop() {
                Some(Node::Op(Op::Neg, mut inner)) => (inner.pop().expect("unary"), true),
                _ => unreachable!(),
            }
        }
        Node::Op(Op::Abs, mut ch) if nonnegative(&ch[0]) => (ch.pop().expect("unary"), true),
        Node::Op(Op::Mul, mut ch) if ch[1] == Node::Leaf(Leaf::One) => {
            ch.pop();
            (ch.pop().expect("binary"), true)
        }
        Node::Op(Op::Mul, mut ch) if ch[0] == Node::Leaf(Leaf::One) => {
            (ch.pop().expect("binary"), true)
        }
        other => (other, false),
    }
}

fn simplify_node(node: Node) -> Node {
    let node = match node {
        Node::Op(op, ch) => Node::Op(op, ch.into_iter().map(simplify_node).collect()),
        leaf => leaf,
    };
    let (node, changed) = rewrite(node);
    if changed {
        simplify_node(node)
    } else {
        node
    }
}

/// Removes useless operators with a fixed set of local rewrites, applied
/// bottom-up until nothing changes:
///
/// * `square(1) → 1`
/// * `neg(neg(x)) → x`
/// * `abs(x) → x` when `x` is non-negative by construction (covers
///   `abs(abs(x)) → abs(x)`)
/// * `mul(x, 1) → x`, `mul(1, x) → x`
///
/// No algebraic cancellation is attempted.
pub fn simplify(g: &LossGraph) -> LossGraph {
    LossGraph { name: g.name.clone(), inputs: g.inputs, body: simplify_node(g.body.clone()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{loss_value, random_graph, InputKind};
    use crate::tensor::{Shape, Tensor4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(text: &str) -> String {
        simplify(&LossGraph::from_formula("g", text).unwrap()).formula()
    }

    #[test]
    fn listed_rewrites() {
        assert_eq!(s("neg(neg(yhat))"), "yhat");
        assert_eq!(s("square(one)"), "one");
        assert_eq!(s("abs(abs(y))"), "abs(y)");
        assert_eq!(s("abs(square(yhat))"), "square(yhat)");
        assert_eq!(s("mul(yhat, one)"), "yhat");
        assert_eq!(s("mul(square(one), neg(neg(y)))"), "y");
        assert_eq!(s("add(y, neg(y))"), "add(y, neg(y))");
        assert_eq!(s("abs(log(yhat))"), "abs(log(yhat))");
    }

    #[test]
    fn simplification_preserves_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shape = Shape::new(2, 3, 4, 4);
        for _ in 0..100 {
            let g = random_graph("g", InputKind::Dense, 3, &mut rng);
            let yhat = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
            let y = Tensor4::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let a = loss_value(&g, &yhat, &y).unwrap();
            let b = loss_value(&simplify(&g), &yhat, &y).unwrap();
            if a.is_nan() {
                assert!(b.is_nan(), "{}", g.formula());
            } else {
                assert!(a == b || (a - b).abs() <= 1e-9 * a.abs().max(1.0), "{}: {a} vs {b}", g.formula());
            }
        }
    }
}
