use std::collections::BTreeSet;

use spt_core::backbone::{BackboneConfig, BackboneWeights, PrefixCache};
use spt_core::bilevel::{search, Budget, SearchConfig};
use spt_core::harness::{
    manual_strategy, retrain_and_eval, select_top_k, LearnedArchitecture, RetrainConfig, Splits, Strategy,
};
use spt_core::hypernet::HyperNetConfig;
use spt_core::prompt_gen::GeneratorConfig;
use spt_core::task::{Dataset, Rule, TaskSpec};

fn backbone() -> BackboneWeights {
    let cfg = BackboneConfig {
        layers: 4,
        width: 8,
        heads: 2,
        vocab: 16,
        max_len: 16,
        ffn_mult: 2,
        visibility_window: None,
    };
    BackboneWeights::init(&cfg, 11)
        .unwrap()
        .freeze()
        .with_visibility(Some(BTreeSet::from([2, 3])))
        .unwrap()
}

fn task() -> TaskSpec {
    TaskSpec {
        name: "t".into(),
        rule: Rule::FixedMajority { first: 5, second: 9 },
        seq_len: 8,
        vocab: 16,
        train: 24,
        dev: 32,
        test: 32,
        data_seed: 3,
        visibility_window: Some(vec![2, 3]),
    }
}

fn hyper() -> HyperNetConfig {
    HyperNetConfig {
        k: 2,
        generator: GeneratorConfig {
            l: 2,
            m: 4,
            n: 2,
            ..GeneratorConfig::default()
        },
        ..HyperNetConfig::default()
    }
}

#[test]
fn search_then_retrain_end_to_end() {
    let w = backbone();
    let hash = w.content_hash();
    let data = Dataset::generate(&task()).unwrap();
    let hyper = hyper();
    let cache = PrefixCache::new(&w, hyper.generator.l);
    let cfg = SearchConfig {
        budget: Budget::Steps(5),
        batch_size: 4,
        ..SearchConfig::default()
    };

    let mut log = Vec::new();
    let out = search(&w, &cache, &hyper, &cfg, &data.train, 0, Some(&mut log)).unwrap();
    assert_eq!(out.steps, 5);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 5);
    assert_eq!(w.content_hash(), hash);

    // Same seed, same gates.
    let again = search(&w, &cache, &hyper, &cfg, &data.train, 0, None).unwrap();
    assert_eq!(again.gates, out.gates);

    let arch = LearnedArchitecture::from_gates(out.gates.a(), hyper.k, "t", 0, "c", hash.clone()).unwrap();
    assert_eq!(arch.chosen_layers.len(), 2);
    assert_eq!(arch.depth(), 5);

    let retrain = RetrainConfig {
        budget: Budget::Steps(4),
        batch_size: 4,
        ..RetrainConfig::default()
    };
    let splits = Splits {
        train: &data.train,
        dev: &data.dev,
        test: &data.test,
    };
    let summary = retrain_and_eval(
        &w,
        &cache,
        &arch.chosen_layers,
        &hyper.generator,
        hyper.tau,
        splits,
        &retrain,
        &[1, 2],
    )
    .unwrap();
    assert_eq!(summary.runs.len(), 2);
    assert!(summary.runs.iter().all(|r| (0.0..=1.0).contains(&r.dev) && (0.0..=1.0).contains(&r.test)));
    assert_eq!(w.content_hash(), hash);
}

#[test]
fn datasets_are_deterministic_and_disjoint() {
    let a = Dataset::generate(&task()).unwrap();
    let b = Dataset::generate(&task()).unwrap();
    assert_eq!(a, b);
    let train: BTreeSet<_> = a.train.iter().map(|e| e.tokens.clone()).collect();
    assert!(a.dev.iter().chain(&a.test).all(|e| !train.contains(&e.tokens)));
}

#[test]
fn discretization_and_manual_placements() {
    assert_eq!(select_top_k(&[0.2, 0.7, 0.7, 0.1, 0.7], 2).unwrap(), [1, 2]);
    assert!(select_top_k(&[0.5; 3], 4).is_err());
    assert_eq!(manual_strategy(Strategy::EveryK(2), 8).unwrap(), [1, 3, 5, 7]);
    assert_eq!(manual_strategy(Strategy::M0, 8).unwrap(), [5]);
    assert_eq!(manual_strategy(Strategy::M1, 8).unwrap(), [5, 7]);
}
