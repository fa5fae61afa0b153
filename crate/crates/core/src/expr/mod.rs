//! Loss functions as rooted expression trees over the primitive operator set.
//!
//! A [`LossGraph`] holds the subtree below the output node; the output node
//! itself is implicit (it always has exactly one child and performs the final
//! sum reduction). Depth therefore counts operator nodes only.

mod eval;
mod hash;
mod random;
mod simplify;
mod text;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryKind, PoolMode, Reduction, UnaryKind};

pub use eval::{
    eval_output, grad_wrt_prediction, loss_value, total_loss, Bindings, BranchInput, GraphEvaluator,
    Normalization,
};
pub use hash::structural_hash;
pub use random::{random_graph, random_node, sample_leaf, sample_op};
pub use simplify::simplify;
pub use text::{format_formula, parse_formula};

/// The fourteen primitive operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Add,
    Mul,
    Neg,
    Abs,
    Inv,
    Log,
    Exp,
    Tanh,
    Square,
    Sqrt,
    MeanNhw,
    MeanC,
    MaxPool,
    MinPool,
}

impl Op {
    pub const ALL: [Op; 14] = [
        Op::Add,
        Op::Mul,
        Op::Neg,
        Op::Abs,
        Op::Inv,
        Op::Log,
        Op::Exp,
        Op::Tanh,
        Op::Square,
        Op::Sqrt,
        Op::MeanNhw,
        Op::MeanC,
        Op::MaxPool,
        Op::MinPool,
    ];

    pub const fn arity(self) -> usize {
        match self {
            Op::Add | Op::Mul => 2,
            _ => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Abs => "abs",
            Op::Inv => "inv",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::MeanNhw => "mean_nhw",
            Op::MeanC => "mean_c",
            Op::MaxPool => "max_pool",
            Op::MinPool => "min_pool",
        }
    }

    pub fn from_name(name: &str) -> Option<Op> {
        Op::ALL.into_iter().find(|op| op.name() == name)
    }

    pub const fn index(self) -> usize {
        self as usize
    }

    pub(crate) fn kernel(self) -> Kernel {
        match self {
            Op::Add => Kernel::Binary(BinaryKind::Add),
            Op::Mul => Kernel::Binary(BinaryKind::Mul),
            Op::Neg => Kernel::Unary(UnaryKind::Neg),
            Op::Abs => Kernel::Unary(UnaryKind::Abs),
            Op::Inv => Kernel::Unary(UnaryKind::Inv),
            Op::Log => Kernel::Unary(UnaryKind::Log),
            Op::Exp => Kernel::Unary(UnaryKind::Exp),
            Op::Tanh => Kernel::Unary(UnaryKind::Tanh),
            Op::Square => Kernel::Unary(UnaryKind::Square),
            Op::Sqrt => Kernel::Unary(UnaryKind::Sqrt),
            Op::MeanNhw => Kernel::Mean(Reduction::MeanNhw),
            Op::MeanC => Kernel::Mean(Reduction::MeanC),
            Op::MaxPool => Kernel::Pool(PoolMode::Max),
            Op::MinPool => Kernel::Pool(PoolMode::Min),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Kernel {
    Unary(UnaryKind),
    Binary(BinaryKind),
    Pool(PoolMode),
    Mean(Reduction),
}

/// Input tensors a graph can read. Dense branches see `{y, yhat, 1}`;
/// box-regression branches see the intersection, union and enclosing areas
/// `{i, u, e, 1}` of the predicted and target boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Leaf {
    Y,
    YHat,
    One,
    Inter,
    Union,
    Enclose,
}

impl Leaf {
    pub const COUNT: usize = 6;

    pub const fn name(self) -> &'static str {
        match self {
            Leaf::Y => "y",
            Leaf::YHat => "yhat",
            Leaf::One => "one",
            Leaf::Inter => "i",
            Leaf::Union => "u",
            Leaf::Enclose => "e",
        }
    }

    pub fn from_name(name: &str) -> Option<Leaf> {
        match name {
            "y" => Some(Leaf::Y),
            "yhat" => Some(Leaf::YHat),
            "one" | "1" => Some(Leaf::One),
            "i" => Some(Leaf::Inter),
            "u" => Some(Leaf::Union),
            "e" => Some(Leaf::Enclose),
            _ => None,
        }
    }

    pub const fn index(self) -> usize {
        self as usize
    }

    /// Leaves that depend on the prediction and therefore carry gradient.
    pub const fn depends_on_prediction(self) -> bool {
        matches!(self, Leaf::YHat | Leaf::Inter | Leaf::Union | Leaf::Enclose)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Dense,
    Areas,
}

impl InputKind {
    pub const fn leaves(self) -> &'static [Leaf] {
        match self {
            InputKind::Dense => &[Leaf::Y, Leaf::YHat, Leaf::One],
            InputKind::Areas => &[Leaf::Inter, Leaf::Union, Leaf::Enclose, Leaf::One],
        }
    }

    pub fn admits(self, leaf: Leaf) -> bool {
        self.leaves().contains(&leaf)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Leaf(Leaf),
    Op(Op, Vec<Node>),
}

impl Node {
    pub fn leaf(leaf: Leaf) -> Node {
        Node::Leaf(leaf)
    }

    pub fn unary(op: Op, child: Node) -> Node {
        debug_assert_eq!(op.arity(), 1);
        Node::Op(op, vec![child])
    }

    pub fn binary(op: Op, a: Node, b: Node) -> Node {
        debug_assert_eq!(op.arity(), 2);
        Node::Op(op, vec![a, b])
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf(_))
    }

    pub fn children(&self) -> &[Node] {
        match self {
            Node::Leaf(_) => &[],
            Node::Op(_, ch) => ch,
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(Node::node_count).sum::<usize>()
    }

    /// Largest number of operator nodes on any path down to a leaf.
    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf(_) => 0,
            Node::Op(_, ch) => 1 + ch.iter().map(Node::depth).max().unwrap_or(0),
        }
    }

    /// Operator count of every root-to-leaf path, in left-to-right order.
    pub fn path_lengths(&self) -> Vec<usize> {
        fn walk(node: &Node, acc: usize, out: &mut Vec<usize>) {
            match node {
                Node::Leaf(_) => out.push(acc),
                Node::Op(_, ch) => ch.iter().for_each(|c| walk(c, acc + 1, out)),
            }
        }
        let mut out = Vec::new();
        walk(self, 0, &mut out);
        out
    }

    pub fn contains_leaf(&self, leaf: Leaf) -> bool {
        match self {
            Node::Leaf(l) => *l == leaf,
            Node::Op(_, ch) => ch.iter().any(|c| c.contains_leaf(leaf)),
        }
    }

    pub fn depends_on_prediction(&self) -> bool {
        match self {
            Node::Leaf(l) => l.depends_on_prediction(),
            Node::Op(_, ch) => ch.iter().any(Node::depends_on_prediction),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// Preorder index → node. Index 0 is `self`.
    pub fn get(&self, index: usize) -> Option<&Node> {
        let mut remaining = index;
        fn find<'a>(node: &'a Node, remaining: &mut usize) -> Option<&'a Node> {
            if *remaining == 0 {
                return Some(node);
            }
            *remaining -= 1;
            for c in node.children() {
                if let Some(hit) = find(c, remaining) {
                    return Some(hit);
                }
            }
            None
        }
        find(self, &mut remaining)
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut Node> {
        fn find<'a>(node: &'a mut Node, remaining: &mut usize) -> Option<&'a mut Node> {
            if *remaining == 0 {
                return Some(node);
            }
            *remaining -= 1;
            if let Node::Op(_, ch) = node {
                for c in ch.iter_mut() {
                    if let Some(hit) = find(c, remaining) {
                        return Some(hit);
                    }
                }
            }
            None
        }
        let mut remaining = index;
        find(self, &mut remaining)
    }

    /// Checks arity consistency and that every leaf belongs to `inputs`.
    pub fn validate(&self, inputs: InputKind) -> Result<()> {
        match self {
            Node::Leaf(l) if inputs.admits(*l) => Ok(()),
            Node::Leaf(l) => Err(Error::Config(format!(
                "leaf `{}` is not an input of a {:?} branch",
                l.name(),
                inputs
            ))),
            Node::Op(op, ch) => {
                if ch.len() != op.arity() {
                    return Err(Error::Config(format!(
                        "`{}` expects {} children, has {}",
                        op.name(),
                        op.arity(),
                        ch.len()
                    )));
                }
                ch.iter().try_for_each(|c| c.validate(inputs))
            }
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_formula(self))
    }
}

/// One loss branch: the expression below the output node, the branch label
/// and the input family it reads.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LossGraph {
    pub name: String,
    pub inputs: InputKind,
    pub body: Node,
}

impl LossGraph {
    pub fn new(name: impl Into<String>, inputs: InputKind, body: Node) -> Result<Self> {
        body.validate(inputs)?;
        Ok(LossGraph { name: name.into(), inputs, body })
    }

    /// Parses a formula, inferring the input family from its leaves
    /// (`one`-only formulas default to dense).
    pub fn from_formula(name: impl Into<String>, text: &str) -> Result<Self> {
        let body = parse_formula(text)?;
        let mut areas = false;
        let mut dense = false;
        body.visit(&mut |n| match n {
            Node::Leaf(Leaf::Y | Leaf::YHat) => dense = true,
            Node::Leaf(Leaf::Inter | Leaf::Union | Leaf::Enclose) => areas = true,
            _ => {}
        });
        if areas && dense {
            return Err(Error::parse(0, "formula mixes y/yhat with box-area inputs"));
        }
        let inputs = if areas { InputKind::Areas } else { InputKind::Dense };
        LossGraph::new(name, inputs, body)
    }

    pub fn depth(&self) -> usize {
        self.body.depth()
    }

    pub fn node_count(&self) -> usize {
        self.body.node_count()
    }

    pub fn formula(&self) -> String {
        format_formula(&self.body)
    }
}

/// Losses of all prediction heads; the total is the (weighted) sum of the
/// branch losses.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiBranchLoss {
    branches: Vec<LossGraph>,
}

impl MultiBranchLoss {
    pub fn new(branches: Vec<LossGraph>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Config("a loss needs at least one branch".into()));
        }
        for (i, b) in branches.iter().enumerate() {
            if branches[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::Config(format!("duplicate branch name `{}`", b.name)));
            }
        }
        Ok(MultiBranchLoss { branches })
    }

    pub fn single(graph: LossGraph) -> Self {
        MultiBranchLoss { branches: vec![graph] }
    }

    pub fn branches(&self) -> &[LossGraph] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [LossGraph] {
        &mut self.branches
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn branch(&self, name: &str) -> Option<&LossGraph> {
        self.branches.iter().find(|b| b.name == name)
    }

    pub fn depends_on_prediction(&self) -> bool {
        self.branches.iter().any(|b| b.body.depends_on_prediction())
    }

    /// Parses `name=formula; name=formula`. A bare formula without `=`
    /// becomes a single branch called `default_name`.
    pub fn parse(text: &str, default_name: &str) -> Result<Self> {
        let text = text.trim();
        if !text.contains('=') {
            return Ok(Self::single(LossGraph::from_formula(default_name, text)?));
        }
        let mut branches = Vec::new();
        let mut offset = 0;
        for part in text.split(';') {
            let start = offset;
            offset += part.len() + 1;
            if part.trim().is_empty() {
                continue;
            }
            let (name, formula) = part.split_once('=').ok_or_else(|| {
                Error::parse(start, "expected `name=formula` in multi-branch loss")
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::parse(start, "empty branch name"));
            }
            let graph = LossGraph::from_formula(name, formula).map_err(|e| match e {
                Error::Parse { pos, msg } => {
                    Error::Parse { pos: start + name.len() + 1 + pos, msg }
                }
                other => other,
            })?;
            branches.push(graph);
        }
        Self::new(branches)
    }
}

impl fmt::Display for MultiBranchLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.branches.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}={}", b.name, b.formula())?;
        }
        Ok(())
    }
}
