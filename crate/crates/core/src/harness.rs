//! Discretization, retraining and evaluation of pruned prompt models, manual
//! placement strategies, transfer runs and heatmap export.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneWeights, Batch, BoundBackbone, PrefixCache, PromptInjector};
use crate::bilevel::Budget;
use crate::error::{Error, Result};
use crate::hypernet::mix_prompt;
use crate::optim::{AdamW, OptimConfig};
use crate::prompt_gen::{BoundGenerator, GeneratorConfig, PromptGenerator};
use crate::rng::stream;
use crate::task::{Example, SplitTag};
use crate::tensor::Tensor;

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in ascending order.
pub fn select_top_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::config("hypernet.k", format!("must lie in 1..={}", values.len())));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("gate value is NaN".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedArchitecture {
    pub chosen_layers: Vec<usize>,
    /// Final gate values `a` for layers `0..=L`.
    pub gate_values: Vec<f64>,
    pub source_task: String,
    pub seed: u64,
    pub config_hash: String,
    pub backbone_hash: String,
}

impl LearnedArchitecture {
    pub fn from_gates(
        gate_values: Vec<f64>,
        k: usize,
        source_task: impl Into<String>,
        seed: u64,
        config_hash: impl Into<String>,
        backbone_hash: impl Into<String>,
    ) -> Result<Self> {
        Ok(Self {
            chosen_layers: select_top_k(&gate_values, k)?,
            gate_values,
            source_task: source_task.into(),
            seed,
            config_hash: config_hash.into(),
            backbone_hash: backbone_hash.into(),
        })
    }

    pub fn depth(&self) -> usize {
        self.gate_values.len()
    }
}

/// Pruned prompt model: fresh generators at the chosen layers only, mixed in
/// with the fixed coefficient `tau`; every other layer carries the prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalModel {
    pub layers: Vec<usize>,
    pub generators: Vec<PromptGenerator>,
    pub tau: f64,
    pub generator: GeneratorConfig,
}

impl FinalModel {
    pub fn build(layers: &[usize], generator: &GeneratorConfig, backbone: &BackboneWeights, tau: f64, seed: u64) -> Result<Self> {
        let depth = backbone.config.layers + 1;
        let set: BTreeSet<usize> = layers.iter().copied().collect();
        if set.len() != layers.len() || set.iter().any(|&i| i >= depth) {
            return Err(Error::config(
                "architecture.chosen_layers",
                format!("{layers:?} is not a set of layers below {depth}"),
            ));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::config("hypernet.tau", "must lie in (0, 1]"));
        }
        let mut rng = stream(seed, "init/final");
        let generators = set
            .iter()
            .map(|_| PromptGenerator::init(generator, backbone.config.width, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers: set.into_iter().collect(),
            generators,
            tau,
            generator: generator.clone(),
        })
    }

    /// Trainable element count; the frozen backbone is excluded.
    pub fn parameter_count(&self) -> usize {
        self.generators.iter().map(PromptGenerator::parameter_count).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.generators.iter_mut().flat_map(|g| g.tensors_mut()).collect()
    }

    fn shapes(&self) -> Vec<[usize; 2]> {
        self.generators.iter().flat_map(|g| g.tensors()).map(|t| t.shape()).collect()
    }

    /// Logits for `examples` with the generators bound as leaves.
    fn logits(
        &self,
        tape: &mut Tape,
        backbone: &BackboneWeights,
        cache: &PrefixCache,
        examples: &[&Example],
        trainable: bool,
    ) -> Result<(Var, Vec<BoundGenerator>, Vec<Var>)> {
        let l = self.generator.l;
        let batch = Batch::from_examples(examples, &backbone.config, l)?;
        let prefix = cache.states(backbone, &batch)?;
        let bound: BoundBackbone = backbone.bind(tape, false)?;
        let gens: Vec<BoundGenerator> = self.generators.iter().map(|g| g.bind(tape, trainable)).collect();
        let coef = tape.constant(Tensor::scalar(self.tau));
        let mut inj = FinalInjector {
            layers: &self.layers,
            generators: &gens,
            coef,
            batch: batch.len(),
            seq: batch.seq,
        };
        let enc = bound.encode(tape, &batch, l, &mut inj, Some(&prefix))?;
        let logits = bound.classify(tape, enc.mask_vectors)?;
        let frozen = bound.vars().to_vec();
        Ok((logits, gens, frozen))
    }
}

struct FinalInjector<'g> {
    layers: &'g [usize],
    generators: &'g [BoundGenerator],
    coef: Var,
    batch: usize,
    seq: usize,
}

impl PromptInjector for FinalInjector<'_> {
    fn inject(&mut self, tape: &mut Tape, layer: usize, tokens: Var, current: Option<Var>) -> Result<Option<Var>> {
        let Ok(slot) = self.layers.binary_search(&layer) else {
            return Ok(current);
        };
        let p_new = self.generators[slot].generate(tape, tokens, self.batch, self.seq)?;
        mix_prompt(tape, current, p_new, self.coef).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub budget: Budget,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Steps(1000),
            batch_size: 8,
            optim: OptimConfig::default(),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be positive"));
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Epochs(0)) {
            return Err(Error::config(format!("{prefix}.budget"), "must be positive"));
        }
        self.optim.validate(&format!("{prefix}.optim"))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        match self.budget {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => e * n.div_ceil(self.batch_size),
        }
    }
}

/// Trains the generators of `model` on `train`; returns the per-step losses.
pub fn retrain(
    backbone: &BackboneWeights,
    cache: &PrefixCache,
    model: &mut FinalModel,
    train: &[Example],
    config: &RetrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate("retrain")?;
    if !backbone.is_frozen() {
        return Err(Error::Contract("retraining requires a frozen backbone".into()));
    }
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let total = config.total_steps(train.len());
    let mut opt = AdamW::new(&config.optim, config.optim.weight_decay, total, &model.shapes());
    let mut rng = stream(seed, "retrain/batches");
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while losses.len() < total {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let picked: Vec<&Example> = order[cursor..end].iter().map(|&i| &train[i]).collect();
        cursor = end;
        let grads = {
            let mut tape = Tape::new();
            let (logits, gens, frozen) = model.logits(&mut tape, backbone, cache, &picked, true)?;
            let labels: Vec<usize> = picked.iter().map(|e| e.label).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("retraining loss is {value} at step {}", losses.len())));
            }
            losses.push(value);
            let g = tape.backward(loss)?;
            if frozen.iter().any(|&v| g.has_path(v)) {
                return Err(Error::Contract("gradient reached a frozen backbone weight".into()));
            }
            gens.iter().flat_map(|b| b.vars()).map(|v| g.get(v)).collect::<Vec<_>>()
        };
        opt.step(&mut model.tensors_mut(), &grads)?;
    }
    Ok(losses)
}

/// Accuracy on `examples`, which must all carry the split tag `expect`.
pub fn evaluate(
    backbone: &BackboneWeights,
    cache: &PrefixCache,
    model: &FinalModel,
    examples: &[Example],
    expect: SplitTag,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    if let Some(bad) = examples.iter().find(|e| e.split != Some(expect)) {
        return Err(Error::Contract(format!(
            "evaluation on {expect:?} received an example tagged {:?}",
            bad.split
        )));
    }
    let mut correct = 0;
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let (logits, _, _) = model.logits(&mut tape, backbone, cache, &refs, false)?;
        let lv = tape.value(logits);
        correct += chunk.iter().enumerate().filter(|(i, e)| lv.argmax_row(*i) == e.label).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dev: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub layers: Vec<usize>,
    pub trainable_parameters: usize,
    pub dev_mean: f64,
    pub dev_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub runs: Vec<SeedResult>,
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train/dev/test splits handed to the harness.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub test: &'a [Example],
}

/// One retraining run: build, train and evaluate.
#[allow(clippy::too_many_arguments)]
pub fn retrain_once(
    backbone: &BackboneWeights,
    cache: &PrefixCache,
    layers: &[usize],
    generator: &GeneratorConfig,
    tau: f64,
    data: Splits,
    config: &RetrainConfig,
    seed: u64,
) -> Result<(FinalModel, SeedResult)> {
    let mut model = FinalModel::build(layers, generator, backbone, tau, seed)?;
    retrain(backbone, cache, &mut model, data.train, config, seed)?;
    let dev = evaluate(backbone, cache, &model, data.dev, SplitTag::Dev)?;
    let test = evaluate(backbone, cache, &model, data.test, SplitTag::Test)?;
    Ok((model, SeedResult { seed, dev, test }))
}

pub fn summarize(layers: &[usize], trainable_parameters: usize, runs: Vec<SeedResult>) -> EvalSummary {
    let dev: Vec<f64> = runs.iter().map(|r| r.dev).collect();
    let test: Vec<f64> = runs.iter().map(|r| r.test).collect();
    let (dev_mean, dev_std) = mean_std(&dev);
    let (test_mean, test_std) = mean_std(&test);
    EvalSummary {
        layers: layers.to_vec(),
        trainable_parameters,
        dev_mean,
        dev_std,
        test_mean,
        test_std,
        runs,
    }
}

/// Retrains the same placement once per seed and reports mean ± std.
#[allow(clippy::too_many_arguments)]
pub fn retrain_and_eval(
    backbone: &BackboneWeights,
    cache: &PrefixCache,
    layers: &[usize],
    generator: &GeneratorConfig,
    tau: f64,
    data: Splits,
    config: &RetrainConfig,
    seeds: &[u64],
) -> Result<EvalSummary> {
    let mut runs = Vec::with_capacity(seeds.len());
    let mut params = 0;
    for &seed in seeds {
        let (model, r) = retrain_once(backbone, cache, layers, generator, tau, data, config, seed)?;
        params = model.parameter_count();
        runs.push(r);
    }
    Ok(summarize(layers, params, runs))
}

/// Retrains on task B at the layers learned on task A.
#[allow(clippy::too_many_arguments)]
pub fn transfer(
    arch: &LearnedArchitecture,
    backbone: &BackboneWeights,
    cache: &PrefixCache,
    generator: &GeneratorConfig,
    tau: f64,
    target: Splits,
    config: &RetrainConfig,
    seeds: &[u64],
) -> Result<EvalSummary> {
    if arch.depth() != backbone.config.layers + 1 {
        return Err(Error::config(
            "architecture",
            format!(
                "architecture covers {} layers, backbone has {}",
                arch.depth(),
                backbone.config.layers + 1
            ),
        ));
    }
    retrain_and_eval(backbone, cache, &arch.chosen_layers, generator, tau, target, config, seeds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// A single layer in the middle of the stack.
    M0,
    /// Middle and three-quarter depth.
    M1,
    /// Layers `1, 1+k, 1+2k, ...` below the last block.
    EveryK(usize),
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::M0 => "M0".into(),
            Strategy::M1 => "M1".into(),
            Strategy::EveryK(k) => format!("every_{k}"),
        }
    }
}

/// Prompt layers of a manual placement for an `layers`-block backbone.
pub fn manual_strategy(kind: Strategy, layers: usize) -> Result<Vec<usize>> {
    if layers < 2 {
        return Err(Error::config("backbone.layers", "manual strategies need at least 2 blocks"));
    }
    Ok(match kind {
        Strategy::M0 => vec![layers / 2 + 1],
        Strategy::M1 => {
            let mut v = vec![layers / 2 + 1, 3 * layers / 4 + 1];
            v.dedup();
            v
        }
        Strategy::EveryK(k) => {
            if k == 0 || k >= layers {
                return Err(Error::config("pilot.k", format!("must lie in 1..{layers}")));
            }
            (1..layers).step_by(k).collect()
        }
    })
}

/// Generator config for `count` prompt layers whose total trainable budget is
/// closest to a single generator with bottleneck `base.m`.
pub fn budget_matched(base: &GeneratorConfig, count: usize, width: usize) -> Result<GeneratorConfig> {
    base.validate("pilot.generator", width)?;
    let target = base.parameter_count(width);
    let best = (1..width)
        .filter(|m| m % base.n == 0)
        .map(|m| GeneratorConfig { m, ..base.clone() })
        .min_by_key(|g| (count * g.parameter_count(width)).abs_diff(target))
        .ok_or_else(|| Error::config("pilot.generator.m", "no admissible bottleneck"))?;
    Ok(best)
}

/// Rows of task names and 0/1 prompt-layer indicators, plus gate values.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub depth: usize,
    pub tasks: Vec<String>,
    pub cells: Vec<Vec<u8>>,
    pub gates: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn from_archs(archs: &[LearnedArchitecture]) -> Result<Self> {
        let depth = archs.first().map(|a| a.depth()).ok_or_else(|| Error::Input("no architectures".into()))?;
        if archs.iter().any(|a| a.depth() != depth) {
            return Err(Error::Input("architectures disagree on depth".into()));
        }
        let cells = archs
            .iter()
            .map(|a| (0..depth).map(|i| u8::from(a.chosen_layers.contains(&i))).collect())
            .collect();
        Ok(Self {
            depth,
            tasks: archs.iter().map(|a| a.source_task.clone()).collect(),
            cells,
            gates: archs.iter().map(|a| a.gate_values.clone()).collect(),
        })
    }

    fn write<T: ToString>(&self, rows: &[Vec<T>]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["task".to_string()];
        header.extend((0..self.depth).map(|i| format!("layer_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (task, row) in self.tasks.iter().zip(rows) {
            let mut rec = vec![task.clone()];
            rec.extend(row.iter().map(ToString::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
    }

    /// Prompt-layer grid as CSV: one row per task, one column per layer.
    pub fn layers_csv(&self) -> Result<String> {
        self.write(&self.cells)
    }

    /// Companion grid of final gate values.
    pub fn gates_csv(&self) -> Result<String> {
        self.write(&self.gates)
    }

    /// Parses a prompt-layer grid written by [`Heatmap::layers_csv`].
    pub fn parse_layers(text: &str) -> Result<(Vec<String>, Vec<Vec<u8>>)> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut tasks = Vec::new();
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let mut fields = rec.iter();
            tasks.push(fields.next().unwrap_or_default().to_string());
            cells.push(
                fields
                    .map(|f| f.parse::<u8>().map_err(|e| Error::Input(format!("cell `{f}`: {e}"))))
                    .collect::<Result<_>>()?,
            );
        }
        Ok((tasks, cells))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

#[cfg(test)]
mod tests;
