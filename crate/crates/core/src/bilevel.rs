//! Alternating first-order bi-level search over generator weights (ω) and
//! gate logits (α).

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{BackboneWeights, Batch, PrefixCache};
use crate::error::{Error, Result};
use crate::hypernet::{gate_values, sample_masks, search_objective, GateSet, HyperNet, HyperNetConfig};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{stream, StreamRng};
use crate::task::Example;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Fixed number of complete steps (few-shot mode).
    Steps(usize),
    /// Full passes over the training set.
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub budget: Budget,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Steps(1000),
            batch_size: 8,
            optim: OptimConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be positive"));
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Epochs(0)) {
            return Err(Error::config(format!("{prefix}.budget"), "must be positive"));
        }
        self.optim.validate(&format!("{prefix}.optim"))
    }

    /// Complete steps per epoch for a training set of `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(2).div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        match self.budget {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => e * self.steps_per_epoch(n),
        }
    }
}

/// Disjoint halves of the training indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSplit {
    pub omega: Vec<usize>,
    pub alpha: Vec<usize>,
}

impl TrainSplit {
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.omega.iter().chain(&self.alpha) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("index {i} repeated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) || self.omega.len().abs_diff(self.alpha.len()) > 1 {
            return Err(Error::Contract("split does not cover the training set evenly".into()));
        }
        Ok(())
    }
}

pub fn split_epoch(n: usize, rng: &mut StreamRng) -> Result<TrainSplit> {
    if n < 2 {
        return Err(Error::config("task.train", "need at least 2 samples to split"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let alpha = idx.split_off(n / 2);
    Ok(TrainSplit { omega: idx, alpha })
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub consistency_loss: f64,
    pub lr: f64,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub gates: GateSet,
    /// Gate logits at the end of each epoch.
    pub trajectory: Vec<Vec<f64>>,
    pub steps: usize,
}

/// Mutable search state: the hyper-network and one optimizer per partition.
pub struct SearchState<'a> {
    pub backbone: &'a BackboneWeights,
    pub net: HyperNet,
    omega_opt: AdamW,
    alpha_opt: AdamW,
    cache: &'a PrefixCache,
    mask_rng: StreamRng,
}

impl<'a> SearchState<'a> {
    pub fn new(
        backbone: &'a BackboneWeights,
        cache: &'a PrefixCache,
        hyper: &HyperNetConfig,
        search: &SearchConfig,
        total_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Contract("search requires a frozen backbone".into()));
        }
        if cache.prompt_len() != hyper.generator.l {
            return Err(Error::Contract("prefix cache built for another prompt length".into()));
        }
        let cfg = &backbone.config;
        let net = HyperNet::init(hyper, cfg.layers, cfg.width, seed)?;
        let shapes: Vec<[usize; 2]> = net.omega().iter().map(|t| t.shape()).collect();
        let omega_opt = AdamW::new(&search.optim, search.optim.weight_decay, total_steps, &shapes);
        let alpha_opt = AdamW::new(&search.optim, 0.0, total_steps, &[[1, cfg.layers + 1]]);
        Ok(Self {
            backbone,
            omega_opt,
            alpha_opt,
            cache,
            mask_rng: stream(seed, "masks"),
            net,
        })
    }

    fn objective(&mut self, examples: &[&Example], train_omega: bool) -> Result<(f64, f64, Vec<Tensor>)> {
        let cfg = &self.net.config;
        let masks = sample_masks(self.net.gates.alpha.len(), cfg.mask_mean, &mut self.mask_rng);
        let batch = Batch::from_examples(examples, &self.backbone.config, cfg.generator.l)?;
        let prefix = self.cache.states(self.backbone, &batch)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let bound = self.backbone.bind(&mut tape, false)?;
        let gens = self.net.bind_generators(&mut tape, train_omega);
        let alpha = tape.leaf(self.net.gates.as_tensor(), !train_omega);
        let a_hat = gate_values(&mut tape, alpha, cfg.reparam)?;
        let loss = search_objective(&mut tape, &bound, &gens, a_hat, cfg, &masks, &batch, &labels, Some(&prefix))?;
        let total = tape.value(loss.total).item();
        if !total.is_finite() {
            let which = if train_omega { "inner" } else { "outer" };
            return Err(Error::Numeric(format!(
                "{which} loss is {total} (task {}, consistency {})",
                loss.task, loss.consistency
            )));
        }
        let grads = tape.backward(loss.total)?;
        if bound.vars().iter().any(|&v| grads.has_path(v)) {
            return Err(Error::Contract("gradient reached a frozen backbone weight".into()));
        }
        let out = if train_omega {
            gens.iter().flat_map(|g| g.vars()).map(|v| grads.get(v)).collect()
        } else {
            vec![grads.get(alpha)]
        };
        Ok((total, loss.consistency, out))
    }

    /// Inner update of ω on `omega_batch`, then outer update of α on
    /// `alpha_batch`. Each half asserts the other partition is untouched.
    pub fn alternating_step(&mut self, omega_batch: &[&Example], alpha_batch: &[&Example], step: usize) -> Result<StepMetrics> {
        let alpha_before = self.net.gates.alpha.clone();
        let (inner_loss, _, g_omega) = self.objective(omega_batch, true)?;
        let lr = self.omega_opt.step(&mut self.net.omega_mut(), &g_omega)?;
        if self.net.gates.alpha != alpha_before {
            return Err(Error::Contract("inner step changed gate logits".into()));
        }

        let omega_before: Vec<Tensor> = self.net.omega().into_iter().cloned().collect();
        let (outer_loss, consistency_loss, g_alpha) = self.objective(alpha_batch, false)?;
        let mut alpha = self.net.gates.as_tensor();
        self.alpha_opt.step(&mut [&mut alpha], &g_alpha)?;
        self.net.gates.alpha = alpha.into_data();
        if self.net.omega().into_iter().ne(omega_before.iter()) {
            return Err(Error::Contract("outer step changed generator weights".into()));
        }
        Ok(StepMetrics {
            step,
            inner_loss,
            outer_loss,
            consistency_loss,
            lr,
            alpha: self.net.gates.alpha.clone(),
        })
    }
}

fn batches<'e>(examples: &'e [Example], idx: &[usize], size: usize) -> Vec<Vec<&'e Example>> {
    idx.chunks(size).map(|c| c.iter().map(|&i| &examples[i]).collect()).collect()
}

/// Runs the bi-level search. One JSON object per complete step is written to
/// `metrics` when given.
pub fn search(
    backbone: &BackboneWeights,
    cache: &PrefixCache,
    hyper: &HyperNetConfig,
    config: &SearchConfig,
    train: &[Example],
    seed: u64,
    mut metrics: Option<&mut dyn Write>,
) -> Result<SearchOutcome> {
    config.validate("search")?;
    hyper.validate("hypernet", backbone.config.layers, backbone.config.width)?;
    let total = config.total_steps(train.len());
    let mut state = SearchState::new(backbone, cache, hyper, config, total, seed)?;
    let mut split_rng = stream(seed, "splits");
    let mut trajectory = Vec::new();
    let mut step = 0;
    while step < total {
        let split = split_epoch(train.len(), &mut split_rng)?;
        split.check(train.len())?;
        let om = batches(train, &split.omega, config.batch_size);
        let al = batches(train, &split.alpha, config.batch_size);
        let per_epoch = om.len().max(al.len());
        for i in 0..per_epoch {
            if step == total {
                break;
            }
            step += 1;
            let m = state.alternating_step(&om[i % om.len()], &al[i % al.len()], step)?;
            if let Some(w) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n").map_err(|e| Error::io("metrics", e))?;
            }
        }
        trajectory.push(state.net.gates.alpha.clone());
    }
    Ok(SearchOutcome {
        gates: state.net.gates,
        trajectory,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::prompt_gen::GeneratorConfig;
    use crate::task::{Dataset, Rule, TaskSpec};

    #[test]
    fn splits_are_disjoint_halves() {
        let mut rng = stream(0, "t");
        let s = split_epoch(10, &mut rng).unwrap();
        assert_eq!((s.omega.len(), s.alpha.len()), (5, 5));
        let s = split_epoch(11, &mut rng).unwrap();
        assert_eq!(s.omega.len() + s.alpha.len(), 11);
        assert!(s.omega.len().abs_diff(s.alpha.len()) == 1);
        for n in 2..102 {
            split_epoch(n, &mut rng).unwrap().check(n).unwrap();
        }
        assert!(matches!(split_epoch(1, &mut rng), Err(Error::Config { .. })));
        let bad = TrainSplit {
            omega: vec![0, 1],
            alpha: vec![1, 2],
        };
        assert!(bad.check(3).is_err());
    }

    fn fixture() -> (BackboneWeights, Vec<Example>, HyperNetConfig) {
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
            dev: 4,
            test: 4,
            data_seed: 0,
            visibility_window: None,
        };
        let data = Dataset::generate(&spec).unwrap();
        let hyper = HyperNetConfig {
            k: 2,
            generator: GeneratorConfig {
                l: 2,
                m: 4,
                n: 2,
                ..GeneratorConfig::default()
            },
            ..HyperNetConfig::default()
        };
        (w, data.train, hyper)
    }

    #[test]
    fn search_is_deterministic_and_logs_every_step() {
        let (w, train, hyper) = fixture();
        let cfg = SearchConfig {
            budget: Budget::Steps(12),
            batch_size: 4,
            ..SearchConfig::default()
        };
        let mut log_a = Vec::new();
        let a = search(&w, &PrefixCache::new(&w, 2), &hyper, &cfg, &train, 5, Some(&mut log_a)).unwrap();
        let mut log_b = Vec::new();
        let b = search(&w, &PrefixCache::new(&w, 2), &hyper, &cfg, &train, 5, Some(&mut log_b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        let lines: Vec<StepMetrics> = std::str::from_utf8(&log_a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines.last().unwrap().alpha, a.gates.alpha);
        // 16 samples, halves of 8, batches of 4: two complete steps per epoch.
        assert_eq!(a.trajectory.len(), 6);
        let c = search(&w, &PrefixCache::new(&w, 2), &hyper, &cfg, &train, 6, None).unwrap();
        assert_ne!(a.gates, c.gates);
    }

    #[test]
    fn search_loss_decreases_on_a_tiny_task() {
        let (w, train, hyper) = fixture();
        let cfg = SearchConfig {
            budget: Budget::Steps(50),
            batch_size: 8,
            optim: OptimConfig {
                lr: 1e-2,
                ..OptimConfig::default()
            },
        };
        let hyper = HyperNetConfig {
            masks: false,
            ..hyper
        };
        let mut log = Vec::new();
        search(&w, &PrefixCache::new(&w, 2), &hyper, &cfg, &train, 1, Some(&mut log)).unwrap();
        let losses: Vec<f64> = std::str::from_utf8(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<StepMetrics>(l).unwrap().inner_loss)
            .collect();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "windowed loss {head} -> {tail}");
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let (w, train, hyper) = fixture();
        let thawed = BackboneWeights::init(&w.config, 3).unwrap();
        let r = search(&thawed, &PrefixCache::new(&thawed, 2), &hyper, &SearchConfig::default(), &train, 0, None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
