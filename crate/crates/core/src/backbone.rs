//! Frozen toy transformer encoder with a mask-position readout head.
//!
//! Layer 0 is the embedding layer; layers `1..=L` are the outputs of the `L`
//! pre-LN transformer blocks. The input layout is `[prompt slots (l)] ++
//! [tokens]`: prompt slots hold whatever block a [`PromptInjector`] writes
//! after each layer, and block `j` lets tokens read the slots only when `j`
//! lies in the visibility window. Prompt slots are never transformed by the
//! blocks; they carry the last injected block forward unchanged.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::autodiff::{AttentionLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{normal_tensor, stream};
use crate::task::{Example, MASK, NUM_LABELS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    /// Blocks in which tokens may attend to prompt slots; `None` means all.
    #[serde(default)]
    pub visibility_window: Option<BTreeSet<usize>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 32,
            heads: 2,
            vocab: 64,
            max_len: 32,
            ffn_mult: 2,
            visibility_window: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        for (k, v) in [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return Err(Error::config(key(k), "must be positive"));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(key("heads"), "width must be divisible by heads"));
        }
        if let Some(w) = &self.visibility_window {
            if let Some(bad) = w.iter().find(|&&i| i >= self.layers) {
                return Err(Error::config(
                    key("visibility_window"),
                    format!("block {bad} outside 0..{}", self.layers),
                ));
            }
        }
        Ok(())
    }

    pub fn sees_prompt(&self, block: usize) -> bool {
        self.visibility_window
            .as_ref()
            .map_or(true, |w| w.contains(&block))
    }

    /// Deepest layer whose token states cannot depend on any prompt.
    pub fn prompt_free_depth(&self) -> usize {
        (0..self.layers)
            .find(|&b| self.sees_prompt(b))
            .unwrap_or(self.layers)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Arc<Tensor>,
    pub ln1_bias: Arc<Tensor>,
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub ln2_gain: Arc<Tensor>,
    pub ln2_bias: Arc<Tensor>,
    pub w1: Arc<Tensor>,
    pub b1: Arc<Tensor>,
    pub w2: Arc<Tensor>,
    pub b2: Arc<Tensor>,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
];

impl BlockWeights {
    fn fields(&self) -> [&Arc<Tensor>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Arc<Tensor>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Backbone parameters plus the readout head over label words.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub token_emb: Arc<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Arc<Tensor>,
    pub final_bias: Arc<Tensor>,
    pub head_w: Arc<Tensor>,
    pub head_b: Arc<Tensor>,
    frozen: bool,
    positions: Arc<Tensor>,
}

fn sinusoidal(max_len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(max_len, width);
    for pos in 0..max_len {
        for i in 0..width {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl BackboneWeights {
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate("backbone")?;
        let mut rng = stream(seed, "init/backbone");
        let d = config.width;
        let f = d * config.ffn_mult;
        let resid = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut w = |r: usize, c: usize, std: f64| Arc::new(normal_tensor(&mut rng, r, c, std));
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let token_emb = w(config.vocab, d, 1.0);
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1_gain: Arc::new(Tensor::filled(1, d, 1.0)),
                ln1_bias: Arc::new(Tensor::zeros(1, d)),
                wq: w(d, d, fan(d)),
                wk: w(d, d, fan(d)),
                wv: w(d, d, fan(d)),
                wo: w(d, d, fan(d) * resid),
                ln2_gain: Arc::new(Tensor::filled(1, d, 1.0)),
                ln2_bias: Arc::new(Tensor::zeros(1, d)),
                w1: w(d, f, fan(d)),
                b1: Arc::new(Tensor::zeros(1, f)),
                w2: w(f, d, fan(f) * resid),
                b2: Arc::new(Tensor::zeros(1, d)),
            })
            .collect();
        let head_w = w(d, NUM_LABELS, fan(d));
        Ok(Self {
            config: config.clone(),
            token_emb,
            blocks,
            final_gain: Arc::new(Tensor::filled(1, d, 1.0)),
            final_bias: Arc::new(Tensor::zeros(1, d)),
            head_w,
            head_b: Arc::new(Tensor::zeros(1, NUM_LABELS)),
            frozen: false,
            positions: Arc::new(sinusoidal(config.max_len, d)),
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Same weights with a different prompt-visibility window.
    pub fn with_visibility(&self, window: Option<BTreeSet<usize>>) -> Result<Self> {
        let mut out = self.clone();
        out.config.visibility_window = window;
        out.config.validate("backbone")?;
        Ok(out)
    }

    pub fn named(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![("token_emb".to_string(), &self.token_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn all_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = vec![&mut self.token_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over every weight and the weight-determining configuration.
    /// The visibility window is excluded: it gates the forward pass only.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut cfg = self.config.clone();
        cfg.visibility_window = None;
        h.update(serde_json::to_vec(&cfg).expect("config serializes"));
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::default();
        for (name, t) in self.named() {
            a.push(name, (**t).clone());
        }
        a.meta
            .insert("backbone_config".into(), serde_json::to_string(&self.config)?);
        a.meta.insert("frozen".into(), self.frozen.to_string());
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let cfg_text = a
            .meta
            .get("backbone_config")
            .ok_or_else(|| Error::Archive("missing backbone_config".into()))?;
        let config: BackboneConfig = serde_json::from_str(cfg_text)?;
        let mut w = Self::init(&config, 0)?;
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(w.all_mut()) {
            let t = a.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Archive(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t.clone());
        }
        w.frozen = a.meta.get("frozen").map(String::as_str) == Some("true");
        Ok(w)
    }

    /// Records the weights on `tape` as constants (frozen) or trainable leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundBackbone<'_>> {
        if trainable && self.frozen {
            return Err(Error::Contract("cannot train a frozen backbone".into()));
        }
        let vars = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(Arc::clone(t), trainable))
            .collect();
        Ok(BoundBackbone {
            weights: self,
            vars,
        })
    }
}

/// Callback that writes the prompt slots after each layer.
pub trait PromptInjector {
    /// `tokens` are the stacked token states after `layer` (`batch·seq × d`);
    /// `current` is the block now in the slots (`None` = all zeros). The
    /// return value replaces it (`batch·l × d`, or `None` for zeros).
    fn inject(
        &mut self,
        tape: &mut Tape,
        layer: usize,
        tokens: Var,
        current: Option<Var>,
    ) -> Result<Option<Var>>;
}

/// Leaves the prompt slots at zero.
pub struct NoPrompt;

impl PromptInjector for NoPrompt {
    fn inject(&mut self, _: &mut Tape, _: usize, _: Var, current: Option<Var>) -> Result<Option<Var>> {
        Ok(current)
    }
}

pub struct Encoded {
    /// Token states at layers `0..=L`.
    pub hiddens: Vec<Var>,
    /// Final normalized state at each sequence's mask position (`batch × d`).
    pub mask_vectors: Var,
}

pub struct BoundBackbone<'w> {
    weights: &'w BackboneWeights,
    vars: Vec<Var>,
}

/// Token sequences of equal length, validated against the backbone.
pub struct Batch<'a> {
    pub tokens: Vec<&'a [usize]>,
    pub seq: usize,
    pub mask_rows: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(tokens: Vec<&'a [usize]>, config: &BackboneConfig, prompt_len: usize) -> Result<Self> {
        let seq = tokens
            .first()
            .map(|t| t.len())
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let mut mask_rows = Vec::with_capacity(tokens.len());
        for (b, t) in tokens.iter().enumerate() {
            if t.len() != seq {
                return Err(Error::Input("sequences in a batch must share a length".into()));
            }
            if seq + prompt_len > config.max_len {
                return Err(Error::Input(format!(
                    "length {seq} + {prompt_len} prompt slots exceeds max_len {}",
                    config.max_len
                )));
            }
            if let Some(&bad) = t.iter().find(|&&x| x >= config.vocab) {
                return Err(Error::Input(format!("token {bad} outside vocab")));
            }
            let masks: Vec<usize> = (0..seq).filter(|&i| t[i] == MASK).collect();
            match masks.as_slice() {
                [m] => mask_rows.push(b * seq + m),
                [] => return Err(Error::Input("sequence has no MASK token".into())),
                _ => return Err(Error::Input("sequence has more than one MASK token".into())),
            }
        }
        Ok(Self {
            tokens,
            seq,
            mask_rows,
        })
    }

    pub fn from_examples(examples: &[&'a Example], config: &BackboneConfig, prompt_len: usize) -> Result<Self> {
        Self::new(examples.iter().map(|e| e.tokens.as_slice()).collect(), config, prompt_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl BoundBackbone<'_> {
    pub fn config(&self) -> &BackboneConfig {
        &self.weights.config
    }

    /// All bound weight handles, in [`BackboneWeights::named`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn block_vars(&self, j: usize) -> &[Var] {
        &self.vars[1 + 12 * j..1 + 12 * (j + 1)]
    }

    fn tail(&self) -> &[Var] {
        &self.vars[1 + 12 * self.weights.config.layers..]
    }

    pub fn embed(&self, tape: &mut Tape, batch: &Batch, prompt_len: usize) -> Result<Var> {
        let ids: Vec<usize> = batch.tokens.iter().flat_map(|t| t.iter().copied()).collect();
        let emb = tape.select_rows(self.vars[0], &ids)?;
        let d = self.weights.config.width;
        let pos = &self.weights.positions;
        let mut pe = Vec::with_capacity(ids.len() * d);
        for _ in 0..batch.len() {
            for i in 0..batch.seq {
                pe.extend_from_slice(pos.row_slice(prompt_len + i));
            }
        }
        let pe = tape.constant(Tensor::new(ids.len(), d, pe)?);
        tape.add(emb, pe)
    }

    pub fn block(
        &self,
        tape: &mut Tape,
        j: usize,
        h: Var,
        prompt: Option<Var>,
        batch: &Batch,
        prompt_len: usize,
    ) -> Result<Var> {
        let cfg = &self.weights.config;
        let v = self.block_vars(j);
        let [ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, w1, b1, w2, b2] =
            <[Var; 12]>::try_from(v).expect("12 block weights");
        let x = tape.layer_norm(h, ln1g, ln1b)?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let vv = tape.matmul(x, wv)?;
        let prompt_kv = match prompt {
            Some(p) if cfg.sees_prompt(j) => {
                let pk = tape.matmul(p, wk)?;
                let pv = tape.matmul(p, wv)?;
                Some((pk, pv))
            }
            _ => None,
        };
        let layout = AttentionLayout {
            batch: batch.len(),
            seq: batch.seq,
            heads: cfg.heads,
            prompt_len,
            width: cfg.width,
        };
        let a = tape.attention(q, k, vv, prompt_kv, layout)?;
        let a = tape.matmul(a, wo)?;
        let h = tape.add(h, a)?;
        let x = tape.layer_norm(h, ln2g, ln2b)?;
        let f = tape.matmul(x, w1)?;
        let f = tape.add(f, b1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add(f, b2)?;
        tape.add(h, f)
    }

    /// Runs the encoder. `prefix`, when given, holds precomputed stacked
    /// token states for layers `0..prefix.len()`; those layers must not be
    /// able to see prompts (see [`BackboneConfig::prompt_free_depth`]).
    pub fn encode(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        prompt_len: usize,
        injector: &mut dyn PromptInjector,
        prefix: Option<&[Tensor]>,
    ) -> Result<Encoded> {
        let cfg = &self.weights.config;
        let cached = prefix.map_or(0, |p| p.len());
        if cached > cfg.prompt_free_depth() + 1 {
            return Err(Error::Contract("prefix reaches into prompt-visible layers".into()));
        }
        let mut h = match prefix {
            Some(p) if !p.is_empty() => tape.constant(p[0].clone()),
            _ => self.embed(tape, batch, prompt_len)?,
        };
        let mut hiddens = vec![h];
        let mut prompt = injector.inject(tape, 0, h, None)?;
        for j in 0..cfg.layers {
            h = if j + 1 < cached {
                tape.constant(prefix.expect("cached")[j + 1].clone())
            } else {
                let p = if cfg.sees_prompt(j) { prompt } else { None };
                self.block(tape, j, h, p, batch, prompt_len)?
            };
            hiddens.push(h);
            prompt = injector.inject(tape, j + 1, h, prompt)?;
        }
        let [fg, fb, _, _] = <[Var; 4]>::try_from(self.tail()).expect("tail weights");
        let mask_states = tape.select_rows(h, &batch.mask_rows)?;
        let mask_vectors = tape.layer_norm(mask_states, fg, fb)?;
        Ok(Encoded {
            hiddens,
            mask_vectors,
        })
    }

    /// Readout head: `mask_vectors · W + b`.
    pub fn classify(&self, tape: &mut Tape, mask_vectors: Var) -> Result<Var> {
        let [_, _, hw, hb] = <[Var; 4]>::try_from(self.tail()).expect("tail weights");
        if tape.shape(mask_vectors)[1] != self.weights.config.width {
            return Err(Error::dim("classify", "mask vector width differs from backbone"));
        }
        let logits = tape.matmul(mask_vectors, hw)?;
        tape.add(logits, hb)
    }
}

/// Memoized prompt-independent token states, keyed by token sequence.
/// Safe to share between threads working with the same weights.
#[derive(Debug)]
pub struct PrefixCache {
    depth: usize,
    prompt_len: usize,
    map: Mutex<HashMap<Vec<usize>, Arc<Vec<Tensor>>>>,
}

impl PrefixCache {
    pub fn new(weights: &BackboneWeights, prompt_len: usize) -> Self {
        Self {
            depth: weights.config.prompt_free_depth() + 1,
            prompt_len,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn compute(&self, weights: &BackboneWeights, tokens: &[usize]) -> Result<Vec<Tensor>> {
        let single = Batch::new(vec![tokens], &weights.config, self.prompt_len)?;
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false)?;
        let mut h = bound.embed(&mut tape, &single, self.prompt_len)?;
        let mut states = vec![tape.value(h).clone()];
        for j in 0..self.depth - 1 {
            h = bound.block(&mut tape, j, h, None, &single, self.prompt_len)?;
            states.push(tape.value(h).clone());
        }
        Ok(states)
    }

    /// Stacked states for layers `0..depth` of `batch`.
    pub fn states(&self, weights: &BackboneWeights, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut rows = Vec::with_capacity(batch.len());
        for t in &batch.tokens {
            let hit = self.map.lock().expect("cache lock").get(*t).cloned();
            let states = match hit {
                Some(s) => s,
                None => {
                    let s = Arc::new(self.compute(weights, t)?);
                    self.map
                        .lock()
                        .expect("cache lock")
                        .insert(t.to_vec(), Arc::clone(&s));
                    s
                }
            };
            rows.push(states);
        }
        let mut out = Vec::with_capacity(self.depth);
        for layer in 0..self.depth {
            let mut data = Vec::with_capacity(batch.len() * batch.seq * weights.config.width);
            for s in &rows {
                data.extend_from_slice(s[layer].data());
            }
            out.push(Tensor::new(batch.len() * batch.seq, weights.config.width, data)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            seed: 0,
            optim: OptimConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        }
    }
}

/// Supervised pretraining of backbone and head on the generic task family,
/// followed by freezing. Returns the frozen weights.
pub fn pretrain_and_freeze(
    config: &BackboneConfig,
    corpus: &[Example],
    prompt_len: usize,
    pre: &PretrainConfig,
) -> Result<BackboneWeights> {
    if corpus.is_empty() {
        return Err(Error::Input("empty pretraining corpus".into()));
    }
    let mut weights = BackboneWeights::init(config, pre.seed)?;
    let shapes: Vec<[usize; 2]> = weights.named().iter().map(|(_, t)| t.shape()).collect();
    let mut opt = AdamW::new(&pre.optim, pre.optim.weight_decay, pre.steps, &shapes);
    let mut rng = stream(pre.seed, "pretrain/batches");
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..pre.steps {
        let mut picked = Vec::with_capacity(pre.batch_size);
        while picked.len() < pre.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(&corpus[order.pop().expect("refilled")]);
        }
        let grads = {
            let mut tape = Tape::new();
            let bound = weights.bind(&mut tape, true)?;
            let batch = Batch::from_examples(&picked, config, prompt_len)?;
            let enc = bound.encode(&mut tape, &batch, prompt_len, &mut NoPrompt, None)?;
            let logits = bound.classify(&mut tape, enc.mask_vectors)?;
            let labels: Vec<usize> = picked.iter().map(|e| e.label).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric("pretraining loss is not finite".into()));
            }
            let g = tape.backward(loss)?;
            bound.vars().iter().map(|&v| g.get(v)).collect::<Vec<_>>()
        };
        let mut params: Vec<&mut Tensor> = weights.all_mut().into_iter().map(Arc::make_mut).collect();
        opt.step(&mut params, &grads)?;
    }
    Ok(weights.freeze())
}

/// Accuracy of the bare backbone (no prompts) on `examples`.
pub fn backbone_accuracy(weights: &BackboneWeights, examples: &[Example], prompt_len: usize) -> Result<f64> {
    let mut correct = 0;
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false)?;
        let batch = Batch::from_examples(&refs, &weights.config, prompt_len)?;
        let enc = bound.encode(&mut tape, &batch, prompt_len, &mut NoPrompt, None)?;
        let logits = bound.classify(&mut tape, enc.mask_vectors)?;
        let lv = tape.value(logits);
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(i, e)| lv.argmax_row(*i) == e.label)
            .count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests;
