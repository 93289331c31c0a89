use super::*;
use crate::backbone::BackboneConfig;
use crate::task::{Dataset, Rule, TaskSpec};
use rand::Rng;

#[test]
fn top_k_orders_by_value() {
    assert_eq!(select_top_k(&[0.9, 0.1, 0.7, 0.3], 2).unwrap(), vec![0, 2]);
    assert_eq!(select_top_k(&[0.5; 4], 2).unwrap(), vec![0, 1]);
    assert!(matches!(select_top_k(&[0.5; 4], 5), Err(Error::Config { .. })));
    assert!(select_top_k(&[0.5; 4], 0).is_err());
}

/// Exhaustive search for the K-subset with the largest sum, preferring the
/// lexicographically smallest sorted subset among equal sums.
fn brute_force(values: &[f64], k: usize) -> Vec<usize> {
    let n = values.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let sum: f64 = subset.iter().map(|&i| values[i]).sum();
        let better = match &best {
            None => true,
            Some((s, b)) => sum > *s || (sum == *s && subset < *b),
        };
        if better {
            best = Some((sum, subset));
        }
    }
    best.unwrap().1
}

#[test]
fn top_k_matches_exhaustive_search() {
    let mut rng = stream(0, "t");
    for _ in 0..500 {
        let n = rng.gen_range(1..=9);
        let k = rng.gen_range(1..=n);
        // Coarse values so ties are common.
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
        assert_eq!(select_top_k(&values, k).unwrap(), brute_force(&values, k), "{values:?} k={k}");
    }
}

#[test]
fn manual_strategies() {
    assert_eq!(manual_strategy(Strategy::EveryK(4), 8).unwrap(), vec![1, 5]);
    assert_eq!(manual_strategy(Strategy::EveryK(1), 8).unwrap(), (1..8).collect::<Vec<_>>());
    assert_eq!(manual_strategy(Strategy::M0, 24).unwrap(), vec![13]);
    assert_eq!(manual_strategy(Strategy::M1, 24).unwrap(), vec![13, 19]);
    assert_eq!(manual_strategy(Strategy::M0, 8).unwrap(), vec![5]);
    assert!(matches!(manual_strategy(Strategy::EveryK(8), 8), Err(Error::Config { .. })));
}

#[test]
fn pilot_budgets_are_comparable() {
    let base = GeneratorConfig {
        m: 16,
        n: 1,
        ..GeneratorConfig::default()
    };
    let reference = base.parameter_count(32) as f64;
    for kind in [Strategy::M0, Strategy::M1, Strategy::EveryK(1), Strategy::EveryK(2), Strategy::EveryK(3), Strategy::EveryK(4)] {
        let layers = manual_strategy(kind, 8).unwrap();
        let g = budget_matched(&base, layers.len(), 32).unwrap();
        let total = (layers.len() * g.parameter_count(32)) as f64;
        assert!((total / reference - 1.0).abs() <= 0.15, "{kind:?}: {total} vs {reference}");
    }
}

fn fixture() -> (BackboneWeights, Dataset) {
    let cfg = BackboneConfig {
        layers: 3,
        width: 8,
        heads: 2,
        vocab: 16,
        max_len: 16,
        ffn_mult: 2,
        visibility_window: Some([1, 2].into_iter().collect()),
    };
    let w = BackboneWeights::init(&cfg, 3).unwrap().freeze();
    let spec = TaskSpec {
        name: "tiny".into(),
        rule: Rule::FixedMajority { first: 5, second: 9 },
        seq_len: 8,
        vocab: 16,
        train: 16,
        dev: 40,
        test: 40,
        data_seed: 0,
        visibility_window: None,
    };
    (w, Dataset::generate(&spec).unwrap())
}

fn small_gen() -> GeneratorConfig {
    GeneratorConfig {
        l: 2,
        m: 4,
        n: 2,
        ..GeneratorConfig::default()
    }
}

#[test]
fn final_model_counts_only_generators() {
    let (w, _) = fixture();
    let m = FinalModel::build(&[0, 2, 3], &small_gen(), &w, 0.5, 1).unwrap();
    assert_eq!(m.parameter_count(), 3 * small_gen().parameter_count(8));
    assert_eq!(m.parameter_count(), 3 * 2 * (8 + 8 * 4 / 2));
    assert!(FinalModel::build(&[4], &small_gen(), &w, 0.5, 1).is_err());
    assert!(FinalModel::build(&[1, 1], &small_gen(), &w, 0.5, 1).is_err());
}

#[test]
fn untrained_model_is_near_chance_and_retraining_is_deterministic() {
    let (w, d) = fixture();
    let cache = PrefixCache::new(&w, 2);
    let model = FinalModel::build(&[1, 2], &small_gen(), &w, 0.5, 1).unwrap();
    let acc = evaluate(&w, &cache, &model, &d.dev, SplitTag::Dev).unwrap();
    assert!((acc - 0.5).abs() <= 0.2, "untrained accuracy {acc}");

    let cfg = RetrainConfig {
        budget: Budget::Steps(6),
        batch_size: 4,
        ..RetrainConfig::default()
    };
    let data = Splits {
        train: &d.train,
        dev: &d.dev,
        test: &d.test,
    };
    let a = retrain_and_eval(&w, &cache, &[1, 2], &small_gen(), 0.5, data, &cfg, &[3, 4]).unwrap();
    let b = retrain_and_eval(&w, &cache, &[1, 2], &small_gen(), 0.5, data, &cfg, &[3, 4]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.runs.len(), 2);
    assert_eq!(a.trainable_parameters, 2 * small_gen().parameter_count(8));
}

#[test]
fn evaluation_refuses_foreign_splits() {
    let (w, d) = fixture();
    let cache = PrefixCache::new(&w, 2);
    let model = FinalModel::build(&[1], &small_gen(), &w, 0.5, 1).unwrap();
    let r = evaluate(&w, &cache, &model, &d.test, SplitTag::Dev);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn self_transfer_equals_native_retraining() {
    let (w, d) = fixture();
    let cache = PrefixCache::new(&w, 2);
    let cfg = RetrainConfig {
        budget: Budget::Steps(4),
        batch_size: 4,
        ..RetrainConfig::default()
    };
    let data = Splits {
        train: &d.train,
        dev: &d.dev,
        test: &d.test,
    };
    let arch = LearnedArchitecture::from_gates(vec![0.2, 0.9, 0.8, 0.1], 2, "tiny", 0, "c", "b").unwrap();
    let native = retrain_and_eval(&w, &cache, &arch.chosen_layers, &small_gen(), 0.5, data, &cfg, &[1]).unwrap();
    let moved = transfer(&arch, &w, &cache, &small_gen(), 0.5, data, &cfg, &[1]).unwrap();
    assert_eq!(native, moved);
    let shallow = LearnedArchitecture::from_gates(vec![0.2, 0.9, 0.8], 2, "x", 0, "c", "b").unwrap();
    assert!(matches!(
        transfer(&shallow, &w, &cache, &small_gen(), 0.5, data, &cfg, &[1]),
        Err(Error::Config { .. })
    ));
}

#[test]
fn heatmap_rows_and_round_trip() {
    let a = LearnedArchitecture::from_gates(vec![0.9, 0.1, 0.8, 0.2, 0.3], 2, "alpha", 0, "", "").unwrap();
    let b = LearnedArchitecture::from_gates(vec![0.1, 0.9, 0.2, 0.8, 0.3], 2, "beta, quoted", 1, "", "").unwrap();
    let h = Heatmap::from_archs(&[a, b]).unwrap();
    let csv = h.layers_csv().unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "alpha,1,0,1,0,0");
    let (tasks, cells) = Heatmap::parse_layers(&csv).unwrap();
    assert_eq!(tasks, h.tasks);
    assert_eq!(cells, h.cells);
    assert!(cells.iter().all(|r| r.iter().map(|&c| c as usize).sum::<usize>() == 2));
    assert_eq!(h.gates_csv().unwrap().lines().count(), 3);
}

#[test]
fn mean_std_convention() {
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
}
