//! Population management and variation operators.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{random_graph, sample_leaf, sample_op, InputKind, LossGraph, MultiBranchLoss, Node};
use crate::reject::Fingerprint;

/// Largest node count a single branch may reach through mutation.
pub const NODE_CAP: usize = 64;
/// Attempts at a mutation that stays under [`NODE_CAP`] before the offspring
/// is re-initialized instead.
pub const MUTATION_RETRIES: usize = 100;
/// Candidates tried per population slot before giving up on finding one that
/// passes rejection.
pub const REJECTION_RETRY_CAP: usize = 10_000;

pub const COPY_PROBABILITY: f64 = 0.10;
pub const REINIT_PROBABILITY: f64 = 0.50;

/// Name and input family of one loss branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub name: String,
    pub inputs: InputKind,
}

impl BranchSpec {
    pub fn new(name: impl Into<String>, inputs: InputKind) -> Self {
        BranchSpec { name: name.into(), inputs }
    }
}

/// Fresh loss with one full random tree of the given depth per branch.
pub fn random_loss<R: Rng + ?Sized>(branches: &[BranchSpec], depth: usize, rng: &mut R) -> MultiBranchLoss {
    let graphs = branches.iter().map(|b| random_graph(b.name.clone(), b.inputs, depth, rng)).collect();
    MultiBranchLoss::new(graphs).expect("branch specs are non-empty and uniquely named")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub loss: MultiBranchLoss,
    fitness: Option<f64>,
    pub fingerprint: Option<Fingerprint>,
    pub generation: u64,
    /// Rejection score the loss achieved when it was admitted.
    pub g_score: Option<f64>,
}

impl Individual {
    pub fn new(loss: MultiBranchLoss, generation: u64) -> Self {
        Individual { loss, fitness: None, fingerprint: None, generation, g_score: None }
    }

    pub fn fitness(&self) -> Option<f64> {
        self.fitness
    }

    /// Records the evaluation score. Panics if one was already recorded.
    pub fn set_fitness(&mut self, fitness: f64) {
        assert!(self.fitness.is_none(), "fitness is assigned once");
        self.fitness = Some(fitness);
    }
}

/// Recency-windowed population: only the newest `capacity` individuals are
/// kept.
#[derive(Clone, Debug)]
pub struct Population {
    members: VecDeque<Individual>,
    capacity: usize,
}

impl Population {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "population capacity must be positive");
        Population { members: VecDeque::with_capacity(capacity.min(4096)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> impl ExactSizeIterator<Item = &Individual> {
        self.members.iter()
    }

    /// Appends `ind`, evicting the oldest member when full. Returns the
    /// evicted individual, if any.
    pub fn push(&mut self, ind: Individual) -> Option<Individual> {
        let evicted = if self.members.len() == self.capacity { self.members.pop_front() } else { None };
        self.members.push_back(ind);
        evicted
    }

    /// Samples `max(1, ceil(t_ratio · len))` evaluated members without
    /// replacement and returns the fittest. Ties go to the most recent
    /// generation, then to the earlier queue position.
    pub fn tournament_select<R: Rng + ?Sized>(&self, t_ratio: f64, rng: &mut R) -> Result<&Individual> {
        if !(t_ratio > 0.0 && t_ratio <= 1.0) {
            return Err(Error::Config(format!("tournament ratio {t_ratio} outside (0, 1]")));
        }
        let eligible: Vec<usize> =
            (0..self.members.len()).filter(|&i| self.members[i].fitness.is_some()).collect();
        if eligible.is_empty() {
            return Err(Error::Selection("no evaluated individuals to select from".into()));
        }
        let size = ((t_ratio * self.members.len() as f64).ceil() as usize).clamp(1, eligible.len());
        let mut picked: Vec<usize> = index::sample(rng, eligible.len(), size).into_iter().map(|k| eligible[k]).collect();
        picked.sort_unstable();
        let mut best = picked[0];
        for &i in &picked[1..] {
            let (a, b) = (&self.members[i], &self.members[best]);
            let (fa, fb) = (a.fitness.unwrap(), b.fitness.unwrap());
            if fa > fb || (fa == fb && a.generation > b.generation) {
                best = i;
            }
        }
        Ok(&self.members[best])
    }
}

/// Builds `k` individuals whose losses pass `accept`, trying at most
/// [`REJECTION_RETRY_CAP`] candidates per slot.
pub fn init_population<R, F>(
    k: usize,
    capacity: usize,
    branches: &[BranchSpec],
    depth: usize,
    rng: &mut R,
    mut accept: F,
) -> Result<Population>
where
    R: Rng + ?Sized,
    F: FnMut(&MultiBranchLoss) -> bool,
{
    if k == 0 || branches.is_empty() {
        return Err(Error::Config("initial population needs k ≥ 1 and at least one branch".into()));
    }
    let mut pop = Population::new(capacity);
    for slot in 0..k {
        let mut found = None;
        for _ in 0..REJECTION_RETRY_CAP {
            let loss = random_loss(branches, depth, rng);
            if accept(&loss) {
                found = Some(loss);
                break;
            }
        }
        let loss = found.ok_or_else(|| Error::RetryCapExhausted {
            attempts: REJECTION_RETRY_CAP,
            context: format!("initial population slot {slot}"),
        })?;
        pop.push(Individual::new(loss, 0));
    }
    Ok(pop)
}

fn fresh_leaf<R: Rng + ?Sized>(inputs: InputKind, rng: &mut R) -> Node {
    Node::Leaf(sample_leaf(inputs, rng))
}

fn replace_at(body: &mut Node, idx: usize, f: impl FnOnce(Node) -> Node) {
    let slot = body.get_mut(idx).expect("node index in range");
    let old = std::mem::replace(slot, Node::Leaf(crate::expr::Leaf::One));
    *slot = f(old);
}

/// Splices a random operator above a uniformly chosen node. A binary
/// operator gets a fresh leaf as its second operand.
pub fn mutate_insert<R: Rng + ?Sized>(g: &LossGraph, rng: &mut R) -> LossGraph {
    let mut out = g.clone();
    let idx = rng.random_range(0..g.node_count());
    let op = sample_op(rng);
    let extra = (op.arity() == 2).then(|| fresh_leaf(g.inputs, rng));
    replace_at(&mut out.body, idx, |old| match extra {
        Some(leaf) => Node::Op(op, vec![old, leaf]),
        None => Node::Op(op, vec![old]),
    });
    out
}

/// Removes a uniformly chosen operator, promoting one of its children.
/// Returns a copy when the graph has no operator.
pub fn mutate_delete<R: Rng + ?Sized>(g: &LossGraph, rng: &mut R) -> LossGraph {
    let mut out = g.clone();
    let ops: Vec<usize> = (0..g.node_count()).filter(|&i| !g.body.get(i).unwrap().is_leaf()).collect();
    if ops.is_empty() {
        return out;
    }
    let idx = ops[rng.random_range(0..ops.len())];
    let arity = g.body.get(idx).unwrap().children().len();
    let keep = rng.random_range(0..arity);
    replace_at(&mut out.body, idx, |old| match old {
        Node::Op(_, mut ch) => ch.swap_remove(keep),
        leaf => leaf,
    });
    out
}

/// Replaces a uniformly chosen node with a random operator, keeping a random
/// subset of its children and filling any shortfall with fresh leaves.
pub fn mutate_replace<R: Rng + ?Sized>(g: &LossGraph, rng: &mut R) -> LossGraph {
    let mut out = g.clone();
    let idx = rng.random_range(0..g.node_count());
    let op = sample_op(rng);
    let old_children = g.body.get(idx).unwrap().children().len();
    let kept: Vec<usize> = if old_children > op.arity() {
        let mut k = index::sample(rng, old_children, op.arity()).into_vec();
        k.sort_unstable();
        k
    } else {
        (0..old_children).collect()
    };
    let fill: Vec<Node> = (kept.len()..op.arity()).map(|_| fresh_leaf(g.inputs, rng)).collect();
    replace_at(&mut out.body, idx, |old| {
        let mut children: Vec<Option<Node>> = match old {
            Node::Op(_, ch) => ch.into_iter().map(Some).collect(),
            Node::Leaf(_) => Vec::new(),
        };
        let mut new: Vec<Node> = kept.iter().map(|&k| children[k].take().unwrap()).collect();
        new.extend(fill);
        Node::Op(op, new)
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Insert,
    Delete,
    Replace,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [MutationKind::Insert, MutationKind::Delete, MutationKind::Replace];

    pub fn apply<R: Rng + ?Sized>(self, g: &LossGraph, rng: &mut R) -> LossGraph {
        match self {
            MutationKind::Insert => mutate_insert(g, rng),
            MutationKind::Delete => mutate_delete(g, rng),
            MutationKind::Replace => mutate_replace(g, rng),
        }
    }
}

/// Which branch of the offspring pipeline produced a child.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffspringPath {
    Copy,
    Reinit,
    Mutate,
}

fn reinit<R: Rng + ?Sized>(parent: &MultiBranchLoss, depth: usize, rng: &mut R) -> MultiBranchLoss {
    let graphs = parent.branches().iter().map(|b| random_graph(b.name.clone(), b.inputs, depth, rng)).collect();
    MultiBranchLoss::new(graphs).expect("parent branches are valid")
}

/// Copy with probability 0.1, otherwise re-initialize with probability 0.5,
/// otherwise apply two random mutations, each to a uniformly chosen branch.
pub fn make_offspring<R: Rng + ?Sized>(
    parent: &MultiBranchLoss,
    depth: usize,
    rng: &mut R,
) -> (MultiBranchLoss, OffspringPath) {
    if rng.random_bool(COPY_PROBABILITY) {
        return (parent.clone(), OffspringPath::Copy);
    }
    if rng.random_bool(REINIT_PROBABILITY) {
        return (reinit(parent, depth, rng), OffspringPath::Reinit);
    }
    let mut child = parent.clone();
    for _ in 0..2 {
        let b = rng.random_range(0..child.len());
        let kind = MutationKind::ALL[rng.random_range(0..3)];
        let current = child.branches()[b].clone();
        let mut done = false;
        for _ in 0..MUTATION_RETRIES {
            let m = kind.apply(&current, rng);
            if m.node_count() <= NODE_CAP {
                child.branches_mut()[b] = m;
                done = true;
                break;
            }
        }
        if !done {
            return (reinit(parent, depth, rng), OffspringPath::Reinit);
        }
    }
    (child, OffspringPath::Mutate)
}

/// Arity/leaf consistency plus the per-branch node cap.
pub fn validate_loss(loss: &MultiBranchLoss) -> Result<()> {
    for b in loss.branches() {
        b.body.validate(b.inputs)?;
        if b.node_count() > NODE_CAP {
            return Err(Error::Config(format!(
                "branch `{}` has {} nodes (cap {NODE_CAP})",
                b.name,
                b.node_count()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Leaf, Op};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Binomial, DiscreteCDF};

    fn dense(text: &str) -> LossGraph {
        LossGraph::from_formula("loss", text).unwrap()
    }

    fn spec() -> Vec<BranchSpec> {
        vec![BranchSpec::new("loss", InputKind::Dense)]
    }

    fn scored(fitness: f64, generation: u64) -> Individual {
        let mut ind = Individual::new(MultiBranchLoss::single(dense("yhat")), generation);
        ind.set_fitness(fitness);
        ind
    }

    #[test]
    fn population_evicts_oldest() {
        let mut pop = Population::new(3);
        for g in 0..5 {
            pop.push(scored(g as f64, g));
        }
        let gens: Vec<u64> = pop.members().map(|m| m.generation).collect();
        assert_eq!(gens, vec![2, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "assigned once")]
    fn fitness_is_write_once() {
        let mut ind = scored(0.5, 0);
        ind.set_fitness(0.6);
    }

    #[test]
    fn init_accept_all_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = init_population(1, 10, &spec(), 3, &mut rng, |_| true).unwrap();
        assert_eq!(pop.len(), 1);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pop = init_population(20, 100, &spec(), 3, &mut rng, |_| true).unwrap();
            pop.members().map(|m| m.loss.to_string()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn init_cap_exhaustion_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = init_population(1, 10, &spec(), 1, &mut rng, |_| false).unwrap_err();
        assert!(matches!(err, Error::RetryCapExhausted { .. }));
    }

    #[test]
    fn tournament_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pop = Population::new(10);
        assert!(pop.tournament_select(0.5, &mut rng).is_err());
        pop.push(Individual::new(MultiBranchLoss::single(dense("y")), 0));
        assert!(pop.tournament_select(0.5, &mut rng).is_err());
        pop.push(scored(0.3, 1));
        assert_eq!(pop.tournament_select(0.05, &mut rng).unwrap().generation, 1);
        for (f, g) in [(0.9, 2), (0.1, 3), (0.9, 4), (0.5, 5)] {
            pop.push(scored(f, g));
        }
        // global argmax, tie resolved towards the newer generation
        assert_eq!(pop.tournament_select(1.0, &mut rng).unwrap().generation, 4);
    }

    #[test]
    fn tournament_selection_probability_rises_with_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pop = Population::new(100);
        for i in 0..100 {
            pop.push(scored(i as f64, i));
        }
        let mut counts = [0usize; 100];
        let draws = 10_000;
        for _ in 0..draws {
            counts[pop.tournament_select(0.05, &mut rng).unwrap().generation as usize] += 1;
        }
        // the winner of a 5-sample tournament has rank r with probability
        // C(r, 4) / C(100, 5); compare decile totals against that oracle
        let choose = |n: f64, k: f64| -> f64 { (0..k as usize).map(|j| (n - j as f64) / (j as f64 + 1.0)).product() };
        let total = choose(100.0, 5.0);
        let mut last = 0.0;
        for d in 0..10 {
            let observed: usize = counts[d * 10..d * 10 + 10].iter().sum();
            let expected: f64 = (d * 10..d * 10 + 10).map(|r| choose(r as f64, 4.0) / total).sum::<f64>() * draws as f64;
            assert!(observed as f64 >= last * 0.9 || d < 3, "decile {d} not increasing");
            assert!((observed as f64 - expected).abs() <= 4.0 * expected.sqrt() + 3.0, "decile {d}: {observed} vs {expected:.1}");
            last = observed as f64;
        }
        assert!(counts[99] > counts[90] && counts[90] > counts[70]);
    }

    #[test]
    fn insert_above_only_leaf_deepens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = dense("yhat");
        for _ in 0..20 {
            let m = mutate_insert(&g, &mut rng);
            assert_eq!(m.depth(), 1);
            assert!(m.body.children()[0] == Node::Leaf(Leaf::YHat));
        }
    }

    #[test]
    fn insertions_grow_by_arity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let g = random_graph("loss", InputKind::Dense, 3, &mut rng);
            let m = mutate_insert(&g, &mut rng);
            let grown = m.node_count() - g.node_count();
            assert!(grown == 1 || grown == 2);
            m.body.validate(InputKind::Dense).unwrap();
        }
    }

    #[test]
    fn delete_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(mutate_delete(&dense("neg(yhat)"), &mut rng), dense("yhat"));
        assert_eq!(mutate_delete(&dense("yhat"), &mut rng), dense("yhat"));
        for _ in 0..1000 {
            let g = random_graph("loss", InputKind::Dense, 3, &mut rng);
            let m = mutate_delete(&g, &mut rng);
            assert!(m.node_count() < g.node_count());
            m.body.validate(InputKind::Dense).unwrap();
        }
    }

    #[test]
    fn replace_binary_with_unary_keeps_each_child_half_the_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = dense("add(y, yhat)");
        let mut kept_y = 0u64;
        let mut trials = 0u64;
        while trials < 2000 {
            let m = mutate_replace(&g, &mut rng);
            // only count replacements of the root binary by a unary operator
            if let Node::Op(op, ch) = &m.body {
                if op.arity() == 1 && ch[0].is_leaf() && m.node_count() == 2 {
                    trials += 1;
                    kept_y += u64::from(ch[0] == Node::Leaf(Leaf::Y));
                }
            }
        }
        let b = Binomial::new(0.5, trials).unwrap();
        let p = 2.0 * b.cdf(kept_y.min(trials - kept_y));
        assert!(p > 0.01, "kept y {kept_y}/{trials}, p={p}");
    }

    #[test]
    fn replace_leaf_gets_fresh_children() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = dense("yhat");
        for _ in 0..200 {
            let m = mutate_replace(&g, &mut rng);
            let Node::Op(op, ch) = &m.body else { panic!("leaf must become an operator") };
            assert_eq!(ch.len(), op.arity());
            assert!(ch.iter().all(Node::is_leaf));
        }
        let unary = dense("neg(yhat)");
        for _ in 0..200 {
            let m = mutate_replace(&unary, &mut rng);
            m.body.validate(InputKind::Dense).unwrap();
            if let Node::Op(op, _) = m.body.clone() {
                if op.arity() == 1 && op != Op::Neg {
                    assert_eq!(m.node_count(), 2);
                }
            }
        }
    }

    #[test]
    fn area_branches_mutate_with_area_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = random_graph("reg", InputKind::Areas, 3, &mut rng);
        for _ in 0..500 {
            let kind = MutationKind::ALL[rng.random_range(0..3)];
            let m = kind.apply(&g, &mut rng);
            m.body.validate(InputKind::Areas).unwrap();
            if m.node_count() <= NODE_CAP {
                g = m;
            }
        }
    }

    #[test]
    fn offspring_path_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let parent = random_loss(&spec(), 3, &mut rng);
        let n = 10_000.0;
        let mut counts = [0.0f64; 3];
        for _ in 0..n as usize {
            let (child, path) = make_offspring(&parent, 3, &mut rng);
            validate_loss(&child).unwrap();
            match path {
                OffspringPath::Copy => {
                    assert_eq!(child, parent);
                    counts[0] += 1.0;
                }
                OffspringPath::Reinit => {
                    assert!(child.branches()[0].body.path_lengths().iter().all(|&l| l == 3));
                    counts[1] += 1.0;
                }
                OffspringPath::Mutate => counts[2] += 1.0,
            }
        }
        for (c, p) in counts.iter().zip([0.10f64, 0.45, 0.45]) {
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((c - n * p).abs() <= 3.0 * sd, "{c} vs {}", n * p);
        }
    }

    #[test]
    fn long_mutation_chains_stay_valid_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = vec![BranchSpec::new("cls", InputKind::Dense), BranchSpec::new("reg", InputKind::Areas)];
        let mut loss = random_loss(&specs, 3, &mut rng);
        for _ in 0..100_000 {
            let (child, _) = make_offspring(&loss, 3, &mut rng);
            validate_loss(&child).unwrap();
            loss = child;
        }
    }
}
