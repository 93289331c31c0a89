use super::*;
use crate::autodiff::finite_diff_check;
use crate::task::{Dataset, Rule, TaskSpec};

fn small_config(window: Option<&[usize]>) -> BackboneConfig {
    BackboneConfig {
        layers: 4,
        width: 8,
        heads: 2,
        vocab: 16,
        max_len: 16,
        ffn_mult: 2,
        visibility_window: window.map(|w| w.iter().copied().collect()),
    }
}

fn seqs() -> Vec<Vec<usize>> {
    vec![
        vec![0, 0, 2, 5, 6, 5, 7, 1],
        vec![0, 0, 2, 6, 6, 9, 5, 1],
        vec![0, 0, 2, 8, 5, 5, 6, 1],
    ]
}

/// Writes a fixed block at selected layers and keeps the previous one elsewhere.
struct Fixed {
    at: Vec<usize>,
    block: Var,
}

impl PromptInjector for Fixed {
    fn inject(&mut self, _: &mut Tape, layer: usize, _: Var, current: Option<Var>) -> Result<Option<Var>> {
        Ok(if self.at.contains(&layer) { Some(self.block) } else { current })
    }
}

fn logits_with(
    w: &BackboneWeights,
    prompt: Option<(&[usize], Tensor)>,
    l: usize,
) -> Tensor {
    let s = seqs();
    let mut tape = Tape::new();
    let bound = w.bind(&mut tape, false).unwrap();
    let batch = Batch::new(s.iter().map(|t| t.as_slice()).collect(), &w.config, l).unwrap();
    let enc = match prompt {
        Some((at, block)) => {
            let block = tape.constant(block);
            let mut inj = Fixed { at: at.to_vec(), block };
            bound.encode(&mut tape, &batch, l, &mut inj, None).unwrap()
        }
        None => bound.encode(&mut tape, &batch, l, &mut NoPrompt, None).unwrap(),
    };
    let logits = bound.classify(&mut tape, enc.mask_vectors).unwrap();
    tape.value(logits).clone()
}

#[test]
fn zero_prompt_equals_no_prompt() {
    let w = BackboneWeights::init(&small_config(None), 1).unwrap();
    let bare = logits_with(&w, None, 3);
    let zero = logits_with(&w, Some((&[0, 1, 2, 3, 4], Tensor::zeros(9, 8))), 3);
    assert!(bare.max_abs_diff(&zero) <= 1e-9);
}

#[test]
fn visibility_window_gates_prompt_influence() {
    let w = BackboneWeights::init(&small_config(Some(&[2])), 1).unwrap();
    let mut rng = stream(5, "test");
    let p = normal_tensor(&mut rng, 9, 8, 1.0);
    let bare = logits_with(&w, None, 3);
    // Blocks are carried forward, so a write at layer 0 still reaches block 2.
    // A write at layer 3 only feeds block 3, which cannot see prompts.
    let late = logits_with(&w, Some((&[3], p.clone())), 3);
    assert_eq!(bare, late);
    let fed = logits_with(&w, Some((&[2], p.clone())), 3);
    assert!(bare.max_abs_diff(&fed) > 1e-6);
    let carried = logits_with(&w, Some((&[0], p)), 3);
    assert_eq!(fed, carried);
}

#[test]
fn gradient_reaches_prompt_only_through_visible_blocks() {
    let w = BackboneWeights::init(&small_config(Some(&[1, 2])), 2).unwrap();
    let s = seqs();
    let run = |layer: usize| {
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape, false).unwrap();
        let p = tape.param(Tensor::filled(9, 8, 0.3));
        let batch = Batch::new(s.iter().map(|t| t.as_slice()).collect(), &w.config, 3).unwrap();
        let mut inj = Fixed { at: vec![layer], block: p };
        let enc = bound.encode(&mut tape, &batch, 3, &mut inj, None).unwrap();
        let logits = bound.classify(&mut tape, enc.mask_vectors).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 1]).unwrap();
        let g = tape.backward(loss).unwrap();
        let frozen_untouched = bound.vars().iter().all(|&v| !g.has_path(v));
        (g.get(p), frozen_untouched)
    };
    let (g_visible, frozen) = run(1);
    assert!(frozen);
    assert!(g_visible.data().iter().any(|x| x.abs() > 1e-8));
    let (g_hidden, _) = run(3);
    assert!(g_hidden.data().iter().all(|&x| x == 0.0));
}

#[test]
fn prompt_gradient_matches_finite_differences() {
    let w = BackboneWeights::init(&small_config(Some(&[1, 3])), 3).unwrap();
    let s = seqs();
    let mut rng = stream(9, "test");
    let x = normal_tensor(&mut rng, 9, 8, 0.5);
    let err = finite_diff_check(
        |tape, p| {
            let bound = w.bind(tape, false)?;
            let batch = Batch::new(s.iter().map(|t| t.as_slice()).collect(), &w.config, 3)?;
            let mut inj = Fixed { at: vec![1], block: p };
            let enc = bound.encode(tape, &batch, 3, &mut inj, None)?;
            let logits = bound.classify(tape, enc.mask_vectors)?;
            tape.cross_entropy(logits, &[1, 0, 1])
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn frozen_weights_refuse_training() {
    let w = BackboneWeights::init(&small_config(None), 1).unwrap().freeze();
    let mut tape = Tape::new();
    assert!(matches!(w.bind(&mut tape, true), Err(Error::Contract(_))));
    assert!(w.bind(&mut tape, false).is_ok());
}

#[test]
fn batching_does_not_change_per_sequence_results() {
    let w = BackboneWeights::init(&small_config(None), 4).unwrap();
    let all = logits_with(&w, None, 2);
    for (i, s) in seqs().iter().enumerate() {
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape, false).unwrap();
        let batch = Batch::new(vec![s.as_slice()], &w.config, 2).unwrap();
        let enc = bound.encode(&mut tape, &batch, 2, &mut NoPrompt, None).unwrap();
        let logits = bound.classify(&mut tape, enc.mask_vectors).unwrap();
        assert_eq!(tape.value(logits).row_slice(0), all.row_slice(i));
    }
}

#[test]
fn prefix_cache_reproduces_full_encoding() {
    let w = BackboneWeights::init(&small_config(Some(&[2, 3])), 6).unwrap();
    assert_eq!(w.config.prompt_free_depth(), 2);
    let s = seqs();
    let cache = PrefixCache::new(&w, 3);
    let mut rng = stream(1, "test");
    let p = normal_tensor(&mut rng, 9, 8, 1.0);
    let run = |cache: Option<&PrefixCache>| {
        let mut tape = Tape::new();
        let bound = w.bind(&mut tape, false).unwrap();
        let batch = Batch::new(s.iter().map(|t| t.as_slice()).collect(), &w.config, 3).unwrap();
        let prefix = cache.map(|c| c.states(&w, &batch).unwrap());
        let block = tape.constant(p.clone());
        let mut inj = Fixed { at: vec![0], block };
        let enc = bound
            .encode(&mut tape, &batch, 3, &mut inj, prefix.as_deref())
            .unwrap();
        let hs: Vec<Tensor> = enc.hiddens.iter().map(|&h| tape.value(h).clone()).collect();
        hs
    };
    let full = run(None);
    let cached = run(Some(&cache));
    assert_eq!(full, cached);
    assert_eq!(cache.len(), 3);
}

#[test]
fn prefix_reaching_visible_layers_is_rejected() {
    let w = BackboneWeights::init(&small_config(Some(&[1])), 6).unwrap();
    let s = seqs();
    let mut tape = Tape::new();
    let bound = w.bind(&mut tape, false).unwrap();
    let batch = Batch::new(vec![s[0].as_slice()], &w.config, 3).unwrap();
    let fake = vec![Tensor::zeros(8, 8); 3];
    let r = bound.encode(&mut tape, &batch, 3, &mut NoPrompt, Some(&fake));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn batch_validation() {
    let cfg = small_config(None);
    let no_mask = [0, 0, 2, 5, 6];
    let two_masks = [1, 0, 2, 5, 1];
    let good = [0, 0, 2, 5, 1];
    assert!(Batch::new(vec![&no_mask], &cfg, 2).is_err());
    assert!(Batch::new(vec![&two_masks], &cfg, 2).is_err());
    assert!(Batch::new(vec![&good], &cfg, 11).is_ok());
    assert!(matches!(Batch::new(vec![&good], &cfg, 12), Err(Error::Input(_))));
    assert!(Batch::new(vec![&good, &seqs()[0][..]], &cfg, 2).is_err());
    assert!(Batch::new(vec![&[0, 99, 1][..]], &cfg, 2).is_err());
}

#[test]
fn config_validation_names_the_key() {
    let mut cfg = small_config(Some(&[4]));
    assert!(matches!(cfg.validate("backbone"), Err(Error::Config { key, .. }) if key == "backbone.visibility_window"));
    cfg.visibility_window = None;
    cfg.heads = 3;
    assert!(matches!(cfg.validate("backbone"), Err(Error::Config { key, .. }) if key == "backbone.heads"));
}

#[test]
fn archive_round_trip() {
    let w = BackboneWeights::init(&small_config(Some(&[1, 2])), 8).unwrap().freeze();
    let dir = tempfile::tempdir().unwrap();
    w.to_archive().unwrap().save(dir.path(), "backbone").unwrap();
    let back = BackboneWeights::from_archive(&TensorArchive::load(dir.path(), "backbone").unwrap()).unwrap();
    assert_eq!(back, w);
    assert!(back.is_frozen());
}

#[test]
fn pretraining_fits_a_fixed_key_task() {
    let cfg = BackboneConfig {
        layers: 2,
        width: 16,
        heads: 2,
        vocab: 16,
        max_len: 16,
        ffn_mult: 2,
        visibility_window: None,
    };
    let spec = TaskSpec {
        name: "pre".into(),
        rule: Rule::FixedMajority { first: 4, second: 7 },
        seq_len: 9,
        vocab: 16,
        train: 600,
        dev: 200,
        test: 10,
        data_seed: 1,
        visibility_window: None,
    };
    let data = Dataset::generate(&spec).unwrap();
    let pre = PretrainConfig {
        steps: 400,
        batch_size: 16,
        seed: 2,
        ..PretrainConfig::default()
    };
    let random = BackboneWeights::init(&cfg, 2).unwrap().freeze();
    let before = backbone_accuracy(&random, &data.dev, 2).unwrap();
    assert!(before < 0.7, "untrained accuracy {before}");
    let w = pretrain_and_freeze(&cfg, &data.train, 2, &pre).unwrap();
    assert!(w.is_frozen());
    let acc = backbone_accuracy(&w, &data.dev, 2).unwrap();
    assert!(acc > 0.7, "dev accuracy {acc}");
}
