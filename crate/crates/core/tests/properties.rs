use lossforge::evolve::{make_offspring, random_loss, validate_loss, OffspringPath};
use lossforge::expr::{format_formula, parse_formula, random_node};
use lossforge::metrics::{seg_metric, BoxF, ConfusionMatrix, SegMetric};
use lossforge::search::TaskConfig;
use lossforge::{BranchSpec, FingerprintCache, InputKind, MultiBranchLoss, SearchConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn box_strategy() -> impl Strategy<Value = BoxF> {
    (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| BoxF::new(x, y, x + w, y + h))
}

proptest! {
    #[test]
    fn formula_text_round_trips(seed in any::<u64>(), depth in 0usize..5, areas in any::<bool>()) {
        let inputs = if areas { InputKind::Areas } else { InputKind::Dense };
        let node = random_node(inputs, depth, &mut ChaCha8Rng::seed_from_u64(seed));
        let text = format_formula(&node);
        prop_assert_eq!(parse_formula(&text).unwrap(), node);
    }

    #[test]
    fn offspring_stay_valid(seed in any::<u64>(), rounds in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [BranchSpec::new("cls", InputKind::Dense), BranchSpec::new("reg", InputKind::Areas)];
        let mut loss = random_loss(&specs, 3, &mut rng);
        for _ in 0..rounds {
            let (child, path) = make_offspring(&loss, 3, &mut rng);
            prop_assert!(validate_loss(&child).is_ok());
            prop_assert_eq!(child.len(), 2);
            for (c, s) in child.branches().iter().zip(&specs) {
                prop_assert_eq!(&c.name, &s.name);
                prop_assert_eq!(c.inputs, s.inputs);
            }
            if path == OffspringPath::Copy {
                prop_assert_eq!(&child, &loss);
            }
            loss = child;
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seg_metrics_are_bounded(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200),
    ) {
        let (pred, target): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_labels(&pred, &target, 4).unwrap();
        let perfect = ConfusionMatrix::from_labels(&target, &target, 4).unwrap();
        for kind in [SegMetric::MIoU, SegMetric::FWIoU, SegMetric::GAcc, SegMetric::MAcc] {
            let v = seg_metric(&cm, kind).unwrap();
            prop_assert!((0.0..=1.0).contains(&v), "{:?} = {}", kind, v);
            prop_assert!((seg_metric(&perfect, kind).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fingerprints_are_reproducible(seed in any::<u64>(), fitness in 0.0..1.0f64) {
        let cfg = SearchConfig::new(TaskConfig::box_regression(), 0);
        let task = cfg.task.build(cfg.seed).unwrap();
        let ctx = cfg.rejection_context(&task).unwrap();
        let loss = random_loss(&[BranchSpec::new("loss", InputKind::Areas)], 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let fp = ctx.fingerprint(&loss).unwrap();
        prop_assert_eq!(&ctx.fingerprint(&loss.clone()).unwrap(), &fp);

        let cache = FingerprintCache::new();
        prop_assert_eq!(cache.lookup(&fp), None);
        cache.insert(fp.clone(), fitness);
        prop_assert_eq!(cache.lookup(&fp), Some(fitness));
        prop_assert_eq!(cache.get_or_insert_with(&fp, || -1.0), (fitness, true));
    }
}

#[test]
fn parsed_corpus_losses_format_back_to_their_text() {
    for line in lossforge::corpus::discovered() {
        let again = MultiBranchLoss::parse(&line.loss.branches()[0].body.to_string(), "loss").unwrap();
        assert_eq!(again.branches()[0].body, line.loss.branches()[0].body, "line {}", line.line);
    }
}
