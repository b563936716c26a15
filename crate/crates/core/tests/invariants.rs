use popdefer::behavior::{categorical_label, wrong_label};
use popdefer::experts::{build_population, expert_label};
use popdefer::data::Instance;
use popdefer::l2d::{decide, surrogate_loss, DeferralDecision, Tally};
use popdefer::numcore::{checkpoint, log_sum_exp, softmax, softmax_cross_entropy, Parameters, Tensor};
use proptest::prelude::*;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cross_entropy_is_shift_invariant(g in logits(12), c in -100.0f64..100.0, pick in 0usize..64) {
        let y = pick % g.len();
        let shifted: Vec<f64> = g.iter().map(|v| v + c).collect();
        let a = softmax_cross_entropy(&g, y).unwrap();
        let b = softmax_cross_entropy(&shifted, y).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn softmax_is_a_distribution(g in logits(12)) {
        let p = softmax(&g);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(log_sum_exp(&g) >= g.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn surrogate_decomposes(g in logits(10), gd in -50.0f64..50.0, y in 0usize..64, m in 0usize..64) {
        let (y, m) = (y % g.len(), m % g.len());
        let mut all = g.clone();
        all.push(gd);
        let class_term = softmax_cross_entropy(&all, y).unwrap();
        let defer_term = if m == y { softmax_cross_entropy(&all, g.len()).unwrap() } else { 0.0 };
        let loss = surrogate_loss(&g, gd, y, m).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - class_term - defer_term).abs() <= 1e-9 * (1.0 + loss));
    }

    #[test]
    fn decision_is_shift_invariant(g in logits(10), gd in -50.0f64..50.0, c in -1e3f64..1e3) {
        let shifted: Vec<f64> = g.iter().map(|v| v + c).collect();
        let a = decide(&g, gd, 3);
        prop_assert_eq!(a, decide(&shifted, gd + c, 3));
        let best = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(matches!(a, DeferralDecision::Defer(3)), gd >= best);
    }

    #[test]
    fn pseudo_labels_keep_the_correctness_bit(
        classes in 2usize..20, y in 0usize..20, seed in any::<u64>(), e in 0usize..10, id in 0usize..10_000, correct in any::<bool>()
    ) {
        let y = y % classes;
        let w = wrong_label(y, classes, seed, e, id);
        prop_assert!(w < classes && w != y);
        let h = categorical_label(correct, y, classes, seed, e, id);
        prop_assert_eq!(h == y, correct);
    }

    #[test]
    fn experts_are_pure_and_exact_on_their_oracle(
        strength in 1usize..=10, id in 0usize..5000, label in 0usize..10, seed in any::<u64>()
    ) {
        let experts = build_population(10, 10, strength, 1, seed).unwrap();
        let inst = Instance { id, features: vec![0.0], label };
        for e in &experts {
            let h = expert_label(e, &inst);
            prop_assert_eq!(h, expert_label(e, &inst));
            prop_assert!(h < 10);
            if e.oracle_set.contains(&label) {
                prop_assert_eq!(h, label);
            } else {
                prop_assert_ne!(h, label);
            }
        }
    }

    #[test]
    fn tally_accounting(records in prop::collection::vec((any::<bool>(), 0usize..4, 0usize..4, 0usize..4), 1..100)) {
        let mut t = Tally::default();
        for (defer, c, y, h) in &records {
            let d = if *defer { DeferralDecision::Defer(0) } else { DeferralDecision::Classify(*c) };
            t.record(d, *y, *h);
        }
        prop_assert_eq!(t.total(), records.len());
        prop_assert_eq!(t.correct(), t.classified_correct + t.deferred_correct);
        prop_assert!((0.0..=1.0).contains(&t.coverage()));
        prop_assert!((0.0..=1.0).contains(&t.system_accuracy()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..6), seed in any::<u64>()) {
        let mut params = Parameters::new();
        let mut r = popdefer::rng::rng(seed);
        for (i, (a, b)) in shapes.iter().enumerate() {
            let data = (0..a * b).map(|_| popdefer::rng::normal(&mut r)).collect();
            params.insert(format!("layer{i}.weight"), Tensor::matrix(*a, *b, data).unwrap()).unwrap();
        }
        let decoded = checkpoint::decode(&checkpoint::encode(&params)).unwrap();
        prop_assert_eq!(&decoded, &params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        checkpoint::save(&path, &params).unwrap();
        prop_assert_eq!(checkpoint::load(&path).unwrap(), params);
    }
}
