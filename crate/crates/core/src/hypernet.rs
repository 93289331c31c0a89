//! Prompt hyper-network: a gated generator at every layer, gate
//! re-parameterization, masked prompt mixing and the two-pass consistency loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::backbone::{Batch, BoundBackbone, Encoded, PromptInjector};
use crate::error::{Error, Result};
use crate::prompt_gen::{BoundGenerator, GeneratorConfig, PromptGenerator};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperNetConfig {
    pub tau: f64,
    pub lambda_c: f64,
    /// Bernoulli mean of the architectural masks.
    pub mask_mean: f64,
    /// Number of prompt layers kept after discretization.
    pub k: usize,
    /// Gate re-parameterization on/off.
    pub reparam: bool,
    /// Architectural masks on/off (off = every mask is 1).
    pub masks: bool,
    pub generator: GeneratorConfig,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda_c: 1.0,
            mask_mean: 0.6,
            k: 4,
            reparam: true,
            masks: true,
            generator: GeneratorConfig::default(),
        }
    }
}

impl HyperNetConfig {
    pub fn validate(&self, prefix: &str, layers: usize, width: usize) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(key("tau"), "must lie in (0, 1]"));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::config(key("lambda_c"), "must be non-negative"));
        }
        if !(self.mask_mean > 0.0 && self.mask_mean < 1.0) {
            return Err(Error::config(key("mask_mean"), "must lie in (0, 1)"));
        }
        if self.k == 0 || self.k > layers + 1 {
            return Err(Error::config(key("k"), format!("must lie in 1..={}", layers + 1)));
        }
        self.generator.validate(&key("generator"), width)
    }

    /// The plain DARTS-style configuration: no re-parameterization, no
    /// masks, no consistency term.
    pub fn without_enhancements(&self) -> Self {
        Self {
            reparam: false,
            masks: false,
            lambda_c: 0.0,
            ..self.clone()
        }
    }
}

/// Gate logits for layers `0..=L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub alpha: Vec<f64>,
}

impl GateSet {
    pub fn zeros(layers: usize) -> Self {
        Self {
            alpha: vec![0.0; layers + 1],
        }
    }

    pub fn a(&self) -> Vec<f64> {
        self.alpha.iter().map(|&x| sigmoid(x)).collect()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::row(&self.alpha)
    }
}

/// `â = a · C` with `C = Σ detach(a) / Σ a`; equal to `a` in value.
pub fn reparameterize(tape: &mut Tape, a: Var) -> Result<Var> {
    let total = tape.sum(a);
    if tape.value(total).item() == 0.0 {
        return Err(Error::Numeric("gate values sum to zero".into()));
    }
    let frozen = tape.detach(total);
    let c = tape.div(frozen, total)?;
    tape.mul(a, c)
}

/// Gate values fed to the mixing rule: `â` when re-parameterized, else `a`.
pub fn gate_values(tape: &mut Tape, alpha: Var, reparam: bool) -> Result<Var> {
    let a = tape.sigmoid(alpha);
    if reparam {
        reparameterize(tape, a)
    } else {
        Ok(a)
    }
}

/// `(1 − c)·p_prev + c·p_new`; a `None` previous block is the zero block.
pub fn mix_prompt(tape: &mut Tape, p_prev: Option<Var>, p_new: Var, coef: Var) -> Result<Var> {
    let fresh = tape.mul(coef, p_new)?;
    match p_prev {
        None => Ok(fresh),
        Some(prev) => {
            let keep = tape.mul(coef, prev)?;
            let kept = tape.sub(prev, keep)?;
            tape.add(kept, fresh)
        }
    }
}

/// Independent Bernoulli(`s`) draws, one per layer.
pub fn sample_masks(count: usize, s: f64, rng: &mut StreamRng) -> Vec<bool> {
    (0..count).map(|_| rng.gen_bool(s)).collect()
}

/// Mean squared difference of two representations.
pub fn consistency_loss(tape: &mut Tape, h_masked: Var, h_unmasked: Var) -> Result<Var> {
    tape.mse(h_masked, h_unmasked)
}

/// Generators plus gate logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet {
    pub config: HyperNetConfig,
    pub generators: Vec<PromptGenerator>,
    pub gates: GateSet,
}

impl HyperNet {
    pub fn init(config: &HyperNetConfig, layers: usize, width: usize, seed: u64) -> Result<Self> {
        config.validate("hypernet", layers, width)?;
        let mut rng = stream(seed, "init/generators");
        let generators = (0..=layers)
            .map(|_| PromptGenerator::init(&config.generator, width, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            generators,
            gates: GateSet::zeros(layers),
        })
    }

    pub fn omega(&self) -> Vec<&Tensor> {
        self.generators.iter().flat_map(|g| g.tensors()).collect()
    }

    pub fn omega_mut(&mut self) -> Vec<&mut Tensor> {
        self.generators.iter_mut().flat_map(|g| g.tensors_mut()).collect()
    }

    pub fn bind_generators(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundGenerator> {
        self.generators.iter().map(|g| g.bind(tape, trainable)).collect()
    }
}

/// Writes gated generator prompts; layers whose coefficient is `None` are
/// skipped entirely (mask off).
pub struct GatedInjector<'g> {
    pub generators: &'g [BoundGenerator],
    pub coefs: Vec<Option<Var>>,
    pub batch: usize,
    pub seq: usize,
}

impl PromptInjector for GatedInjector<'_> {
    fn inject(&mut self, tape: &mut Tape, layer: usize, tokens: Var, current: Option<Var>) -> Result<Option<Var>> {
        let Some(coef) = self.coefs.get(layer).copied().flatten() else {
            return Ok(current);
        };
        let p_new = self.generators[layer].generate(tape, tokens, self.batch, self.seq)?;
        mix_prompt(tape, current, p_new, coef).map(Some)
    }
}

/// Per-layer mixing coefficients `m_i·τ·â_i`; `masks = None` is the
/// unmasked pass.
pub fn mixing_coefs(tape: &mut Tape, a_hat: Var, tau: f64, masks: Option<&[bool]>) -> Result<Vec<Option<Var>>> {
    let n = tape.shape(a_hat)[1];
    if let Some(m) = masks {
        if m.len() != n {
            return Err(Error::dim("mixing_coefs", format!("{} masks for {n} gates", m.len())));
        }
    }
    (0..n)
        .map(|i| {
            if masks.is_some_and(|m| !m[i]) {
                return Ok(None);
            }
            let ai = tape.slice_cols(a_hat, i, 1)?;
            Ok(Some(tape.scale(ai, tau)))
        })
        .collect()
}

/// One hyper-network pass over `batch`.
#[allow(clippy::too_many_arguments)]
pub fn forward_hypernet(
    tape: &mut Tape,
    backbone: &BoundBackbone,
    generators: &[BoundGenerator],
    a_hat: Var,
    tau: f64,
    masks: Option<&[bool]>,
    batch: &Batch,
    prompt_len: usize,
    prefix: Option<&[Tensor]>,
) -> Result<Encoded> {
    let layers = backbone.config().layers;
    if generators.len() != layers + 1 {
        return Err(Error::Contract(format!(
            "{} generators for {} layers",
            generators.len(),
            layers + 1
        )));
    }
    let coefs = mixing_coefs(tape, a_hat, tau, masks)?;
    let mut inj = GatedInjector {
        generators,
        coefs,
        batch: batch.len(),
        seq: batch.seq,
    };
    backbone.encode(tape, batch, prompt_len, &mut inj, prefix)
}

pub struct SearchLoss {
    pub total: Var,
    pub task: f64,
    pub consistency: f64,
}

/// Task loss on the masked pass plus `λc` times the consistency term
/// against an unmasked pass of the same batch.
#[allow(clippy::too_many_arguments)]
pub fn search_objective(
    tape: &mut Tape,
    backbone: &BoundBackbone,
    generators: &[BoundGenerator],
    a_hat: Var,
    config: &HyperNetConfig,
    masks: &[bool],
    batch: &Batch,
    labels: &[usize],
    prefix: Option<&[Tensor]>,
) -> Result<SearchLoss> {
    let l = config.generator.l;
    let masked = forward_hypernet(
        tape,
        backbone,
        generators,
        a_hat,
        config.tau,
        config.masks.then_some(masks),
        batch,
        l,
        prefix,
    )?;
    let logits = backbone.classify(tape, masked.mask_vectors)?;
    let task = tape.cross_entropy(logits, labels)?;
    let task_value = tape.value(task).item();
    if config.lambda_c == 0.0 || !config.masks {
        return Ok(SearchLoss {
            total: task,
            task: task_value,
            consistency: 0.0,
        });
    }
    let unmasked = forward_hypernet(tape, backbone, generators, a_hat, config.tau, None, batch, l, prefix)?;
    let cons = consistency_loss(tape, masked.mask_vectors, unmasked.mask_vectors)?;
    let cons_value = tape.value(cons).item();
    let weighted = tape.scale(cons, config.lambda_c);
    Ok(SearchLoss {
        total: tape.add(task, weighted)?,
        task: task_value,
        consistency: cons_value,
    })
}

/// Gate-logit gradient implied by `∂L/∂â` through the re-parameterization:
/// `a_i(1−a_i)·(g_i − Σ_k a_k g_k / Σ_j a_j)`.
pub fn closed_form_alpha_grad(alpha: &[f64], dl_dahat: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = alpha.iter().map(|&x| sigmoid(x)).collect();
    let total: f64 = a.iter().sum();
    let avg: f64 = a.iter().zip(dl_dahat).map(|(ak, gk)| ak * gk).sum::<f64>() / total;
    a.iter()
        .zip(dl_dahat)
        .map(|(ai, gi)| ai * (1.0 - ai) * (gi - avg))
        .collect()
}
