use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use lossforge::expr::{Bindings, GraphEvaluator, Normalization};
use lossforge::proxy::{train_and_score_with, TaskKind};
use lossforge::search::TaskConfig;
use lossforge::{LossGraph, MultiBranchLoss, SearchConfig, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CE: &str = "neg(mul(y, log(yhat)))";

fn operators(c: &mut Criterion) {
    let shape = Shape::new(8, 4, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let yhat: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.05..0.95)).collect();
    let y: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut g = c.benchmark_group("operators");
    for (name, formula) in [
        ("ce", CE),
        ("pooled", "mean_nhw(mul(neg(max_pool(y)), log(max_pool(yhat))))"),
        ("deep", "neg(log(mul(mul(square(yhat), y), sqrt(neg(min_pool(neg(yhat)))))))"),
    ] {
        let graph = LossGraph::from_formula("loss", formula).unwrap();
        let mut ev = GraphEvaluator::new(&graph.body, shape);
        g.bench_function(format!("{name}/forward"), |b| {
            b.iter(|| black_box(ev.loss(&Bindings::dense(&yhat, &y), Normalization::PerPosition)))
        });
        g.bench_function(format!("{name}/backward"), |b| {
            b.iter(|| black_box(ev.loss_and_grad(&Bindings::dense(&yhat, &y), Normalization::PerPosition)))
        });
    }
    g.finish();
}

fn rejection(c: &mut Criterion) {
    let mut g = c.benchmark_group("rejection");
    g.sample_size(20);
    for (kind, formula) in [
        (TaskKind::Seg, CE.to_owned()),
        (TaskKind::Box, "neg(log(mul(i, inv(e))))".to_owned()),
        (TaskKind::Det, format!("cls={CE}; reg=neg(log(mul(i, inv(e))))")),
    ] {
        let cfg = SearchConfig::new(TaskConfig::default_for(kind), 0);
        let task = cfg.task.build(cfg.seed).unwrap();
        let ctx = cfg.rejection_context(&task).unwrap();
        let loss = MultiBranchLoss::parse(&formula, "loss").unwrap();
        g.bench_function(kind.name(), |b| b.iter(|| black_box(ctx.correlation_score(&loss).unwrap())));
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    for (kind, formula) in [
        (TaskKind::Seg, CE.to_owned()),
        (TaskKind::Box, "neg(log(mul(i, inv(e))))".to_owned()),
        (TaskKind::Det, format!("cls={CE}; reg=neg(log(mul(i, inv(e))))")),
    ] {
        let task = TaskConfig::default_for(kind).build(0).unwrap();
        let loss = MultiBranchLoss::parse(&formula, "loss").unwrap();
        g.bench_function(kind.name(), |b| {
            b.iter_batched(|| loss.clone(), |l| train_and_score_with(&task, &l, 0, true).unwrap(), BatchSize::SmallInput)
        });
    }
    g.finish();
}

criterion_group!(benches, operators, rejection, training);
criterion_main!(benches);
