//! Invariant battery behind the `gradcheck` command: finite-difference checks
//! for every op and for the full search objective, the closed-form gate
//! gradient, value identities, the frozen-backbone contract and mask purity.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, max_relative_error, AttentionLayout, Tape, Var};
use crate::backbone::{BackboneConfig, BackboneWeights, Batch};
use crate::bilevel::{search, Budget, SearchConfig};
use crate::backbone::PrefixCache;
use crate::error::Result;
use crate::hypernet::{closed_form_alpha_grad, gate_values, reparameterize, search_objective, HyperNet, HyperNetConfig};
use crate::prompt_gen::{GeneratorConfig, PhmLinear};
use crate::rng::{normal_tensor, stream, uniform_tensor, StreamRng};
use crate::task::{Dataset, Rule, TaskSpec};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-8;
pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const CLOSED_FORM_TRIALS: usize = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Worst observed error (or 0/1 for boolean checks).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }

    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub passed: bool,
    /// Wall-clock time; not serialized.
    #[serde(skip)]
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Weighted sum with random weights (fixed per stream), so that ops whose plain sum is
/// constant (softmax, layer norm) still get a non-trivial gradient.
fn probe(tape: &mut Tape, y: Var, rng: &mut StreamRng) -> Result<Var> {
    let [r, c] = tape.shape(y);
    let w = tape.constant(normal_tensor(rng, r, c, 1.0));
    let z = tape.mul(y, w)?;
    Ok(tape.sum(z))
}

type OpFn = Box<dyn FnMut(&mut Tape, Var) -> Result<Var>>;

/// Finite-difference checks of each primitive, one input at a time.
pub fn op_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/ops");
    let mut t = |r: usize, c: usize| normal_tensor(&mut rng, r, c, 1.0);
    let b34 = t(3, 4);
    let b43 = t(4, 3);
    let row = t(1, 4);
    let pos = uniform_tensor(&mut stream(seed, "verify/pos"), 3, 4, 0.5, 2.0);
    let gain = t(1, 4);
    let bias = t(1, 4);
    let kb = t(2, 3);
    let lay = AttentionLayout {
        batch: 2,
        seq: 3,
        heads: 2,
        prompt_len: 2,
        width: 4,
    };
    let q = t(6, 4);
    let k = t(6, 4);
    let v = t(6, 4);
    let pk = t(4, 4);
    let pv = t(4, 4);
    let weights_seed = seed;

    let mut cases: Vec<(&str, OpFn, Tensor)> = Vec::new();
    macro_rules! case {
        ($name:expr, $x:expr, |$tape:ident, $v:ident| $body:expr) => {{
            let label = $name;
            cases.push((
                $name,
                Box::new(move |$tape: &mut Tape, $v: Var| -> Result<Var> {
                    let y = $body?;
                    probe($tape, y, &mut stream(weights_seed, label))
                }),
                $x,
            ));
        }};
    }
    {
        let b = b43.clone();
        case!("matmul/left", b34.clone(), |tape, x| {
            let c = tape.constant(b.clone());
            tape.matmul(x, c)
        });
    }
    {
        let a = b34.clone();
        case!("matmul/right", b43.clone(), |tape, x| {
            let c = tape.constant(a.clone());
            tape.matmul(c, x)
        });
    }
    for (name, op) in [
        ("add/row", crate::autodiff::BinaryOp::Add),
        ("sub/row", crate::autodiff::BinaryOp::Sub),
        ("mul/row", crate::autodiff::BinaryOp::Mul),
    ] {
        let m = b34.clone();
        case!(name, row.clone(), |tape, x| {
            let c = tape.constant(m.clone());
            tape.binary(op, c, x)
        });
    }
    {
        let m = b34.clone();
        case!("div/denominator", pos.clone(), |tape, x| {
            let c = tape.constant(m.clone());
            tape.div(c, x)
        });
    }
    case!("sigmoid", b34.clone(), |tape, x| Ok::<_, crate::Error>(tape.sigmoid(x)));
    case!("tanh", b34.clone(), |tape, x| Ok::<_, crate::Error>(tape.tanh(x)));
    case!("relu", b34.clone(), |tape, x| Ok::<_, crate::Error>(tape.relu(x)));
    case!("softmax_rows", b34.clone(), |tape, x| Ok::<_, crate::Error>(tape.softmax_rows(x)));
    {
        let (g, b) = (gain.clone(), bias.clone());
        case!("layer_norm/input", b34.clone(), |tape, x| {
            let g = tape.constant(g.clone());
            let b = tape.constant(b.clone());
            tape.layer_norm(x, g, b)
        });
    }
    {
        let m = b34.clone();
        let b = bias.clone();
        case!("layer_norm/gain", gain.clone(), |tape, x| {
            let m = tape.constant(m.clone());
            let b = tape.constant(b.clone());
            tape.layer_norm(m, x, b)
        });
    }
    {
        let a = kb.clone();
        case!("kron/left", t(2, 2), |tape, x| {
            let b = tape.constant(a.clone());
            Ok::<_, crate::Error>(tape.kron(x, b))
        });
    }
    case!("transpose+slice+select+concat", b34.clone(), |tape, x| {
        let tr = tape.transpose(x);
        let s = tape.slice_rows(tr, 1, 2)?;
        let c = tape.slice_cols(x, 1, 3)?;
        let sel = tape.select_rows(x, &[2, 0, 2])?;
        let joined = tape.concat_cols(&[c, sel])?;
        let m = tape.matmul(s, joined)?;
        tape.concat_rows(&[m, m])
    });
    let attention_inputs = [q.clone(), k.clone(), v.clone(), pk.clone(), pv.clone()];
    for (slot, name) in ["attention/q", "attention/k", "attention/v", "attention/prompt_k", "attention/prompt_v"]
        .into_iter()
        .enumerate()
    {
        let inputs = attention_inputs.clone();
        let start = inputs[slot].clone();
        case!(name, start, |tape, x| {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == slot { x } else { tape.constant(t.clone()) })
                .collect();
            tape.attention(vars[0], vars[1], vars[2], Some((vars[3], vars[4])), lay)
        });
    }

    let mut checks = Vec::new();
    for (name, mut f, x) in cases {
        let err = finite_diff_check(&mut f, &x, 1e-5)?;
        checks.push(Check::below(format!("op/{name}"), err, OP_TOLERANCE));
    }
    let targets = [1usize, 0, 3];
    let err = finite_diff_check(|tape, x| tape.cross_entropy(x, &targets), &b34, 1e-5)?;
    checks.push(Check::below("op/cross_entropy", err, OP_TOLERANCE));
    let other = b34.map(|x| 0.5 * x + 0.1);
    let err = finite_diff_check(
        |tape, x| {
            let c = tape.constant(other.clone());
            tape.mse(x, c)
        },
        &b34,
        1e-5,
    )?;
    checks.push(Check::below("op/mse", err, OP_TOLERANCE));
    Ok(checks)
}

/// Small frozen backbone, hyper-network and batch used by the model-level checks.
pub struct Fixture {
    pub backbone: BackboneWeights,
    pub net: HyperNet,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = BackboneConfig {
            layers: 4,
            width: 8,
            heads: 2,
            vocab: 16,
            max_len: 16,
            ffn_mult: 2,
            visibility_window: Some([2, 3].into_iter().collect()),
        };
        let backbone = BackboneWeights::init(&cfg, seed)?.freeze();
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
        let mut net = HyperNet::init(&hyper, cfg.layers, cfg.width, seed)?;
        let mut rng = stream(seed, "verify/fixture");
        for t in net.omega_mut() {
            *t = normal_tensor(&mut rng, t.rows(), t.cols(), 0.5);
        }
        net.gates.alpha = (0..=cfg.layers).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Ok(Self {
            backbone,
            net,
            tokens: vec![vec![0, 0, 2, 5, 6, 5, 7, 1], vec![0, 0, 2, 6, 6, 9, 5, 1], vec![0, 0, 2, 9, 9, 5, 8, 1]],
            labels: vec![0, 1, 1],
        })
    }

    /// Full search objective (task + consistency) with `alpha` bound to `alpha_var`
    /// and optionally one generator tensor replaced by `omega_var`.
    fn objective(&self, tape: &mut Tape, alpha: Var, omega: Option<Var>, reparam: bool, masks: &[bool]) -> Result<Var> {
        let bound = self.backbone.bind(tape, false)?;
        let mut gens = self.net.bind_generators(tape, false);
        if let Some(v) = omega {
            gens[2].down.b[1] = v;
        }
        let a_hat = gate_values(tape, alpha, reparam)?;
        let batch = Batch::new(self.tokens.iter().map(|t| t.as_slice()).collect(), &self.backbone.config, 2)?;
        let cfg = HyperNetConfig {
            reparam,
            ..self.net.config.clone()
        };
        Ok(search_objective(tape, &bound, &gens, a_hat, &cfg, masks, &batch, &self.labels, None)?.total)
    }
}

/// Finite differences over the full search loss. Gate logits are checked
/// with the re-parameterization off, since its gradient is by design not
/// the derivative of the forward value.
pub fn model_checks(fx: &Fixture) -> Result<Vec<Check>> {
    let masks = [true, true, false, true, true];
    let alpha = fx.net.gates.as_tensor();
    let err = finite_diff_check(|tape, a| fx.objective(tape, a, None, false, &masks), &alpha, 1e-5)?;
    let mut out = vec![Check::below("model/full_loss_wrt_gates", err, MODEL_TOLERANCE)];
    let omega = fx.net.generators[2].down.b[1].clone();
    let err = finite_diff_check(
        |tape, w| {
            let a = tape.constant(alpha.clone());
            fx.objective(tape, a, Some(w), true, &masks)
        },
        &omega,
        1e-5,
    )?;
    out.push(Check::below("model/full_loss_wrt_generator", err, MODEL_TOLERANCE));
    Ok(out)
}

pub type Reparam = dyn Fn(&mut Tape, Var) -> Result<Var>;

/// Smooth loss of `â` with distinct per-layer sensitivities.
fn downstream(tape: &mut Tape, a_hat: Var, u: &Tensor, v: &Tensor) -> Result<Var> {
    let u = tape.constant(u.clone());
    let v = tape.constant(v.clone());
    let x = tape.mul(a_hat, u)?;
    let x = tape.tanh(x);
    let first = tape.sum(x);
    let y = tape.mul(a_hat, v)?;
    let y = tape.sum(y);
    let second = tape.mul(y, y)?;
    tape.add(first, second)
}

/// Tape gradient through `reparam` versus the hand-written closed form on
/// random configurations of up to 9 gates, plus one trial through the full
/// search objective.
pub fn closed_form_check(reparam: &Reparam, seed: u64, fx: &Fixture) -> Result<Check> {
    let mut rng = stream(seed, "verify/closed_form");
    let mut worst: f64 = 0.0;
    let through = |tape: &mut Tape, alpha: Var| -> Result<Var> {
        let a = tape.sigmoid(alpha);
        reparam(tape, a)
    };
    for _ in 0..CLOSED_FORM_TRIALS {
        let n = rng.gen_range(2..=9);
        let alpha = uniform_tensor(&mut rng, 1, n, -3.0, 3.0);
        let u = normal_tensor(&mut rng, 1, n, 1.0);
        let v = normal_tensor(&mut rng, 1, n, 1.0);
        let mut tape = Tape::new();
        let x = tape.param(alpha.clone());
        let a_hat = through(&mut tape, x)?;
        let loss = downstream(&mut tape, a_hat, &u, &v)?;
        let auto = tape.backward(loss)?.get(x);

        let mut tape = Tape::new();
        let leaf = tape.param(alpha.map(crate::autodiff::sigmoid));
        let loss = downstream(&mut tape, leaf, &u, &v)?;
        let g = tape.backward(loss)?.get(leaf);
        let closed = Tensor::row(&closed_form_alpha_grad(alpha.data(), g.data()));
        worst = worst.max(max_relative_error(&auto, &closed));
    }

    // One trial through the real objective.
    let masks = [true; 5];
    let bound_loss = |tape: &mut Tape, a_hat: Var| -> Result<Var> {
        let bound = fx.backbone.bind(tape, false)?;
        let gens = fx.net.bind_generators(tape, false);
        let batch = Batch::new(fx.tokens.iter().map(|t| t.as_slice()).collect(), &fx.backbone.config, 2)?;
        Ok(search_objective(tape, &bound, &gens, a_hat, &fx.net.config, &masks, &batch, &fx.labels, None)?.total)
    };
    let mut tape = Tape::new();
    let x = tape.param(fx.net.gates.as_tensor());
    let a_hat = through(&mut tape, x)?;
    let loss = bound_loss(&mut tape, a_hat)?;
    let auto = tape.backward(loss)?.get(x);
    let mut tape = Tape::new();
    let leaf = tape.param(Tensor::row(&fx.net.gates.a()));
    let loss = bound_loss(&mut tape, leaf)?;
    let g = tape.backward(loss)?.get(leaf);
    let closed = Tensor::row(&closed_form_alpha_grad(&fx.net.gates.alpha, g.data()));
    worst = worst.max(max_relative_error(&auto, &closed));
    Ok(Check::below("reparam/closed_form_gradient", worst, CLOSED_FORM_TOLERANCE))
}

pub fn reparam_checks(fx: &Fixture, seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/reparam");
    let mut value_gap: f64 = 0.0;
    let mut null_grad: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=9);
        let alpha = uniform_tensor(&mut rng, 1, n, -4.0, 4.0);
        let c = rng.gen_range(-5.0..5.0);
        let mut tape = Tape::new();
        let x = tape.param(alpha);
        let a = tape.sigmoid(x);
        let a_hat = reparameterize(&mut tape, a)?;
        value_gap = value_gap.max(tape.value(a_hat).max_abs_diff(tape.value(a)));
        let s = tape.sum(a_hat);
        let loss = tape.scale(s, c);
        let g = tape.backward(loss)?.get(x);
        null_grad = null_grad.max(g.data().iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let masks = [true, false, true, true, false];
    let forward = |reparam: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(fx.net.gates.as_tensor());
        let loss = fx.objective(&mut tape, a, None, reparam, &masks)?;
        Ok(tape.value(loss).item())
    };
    let output_gap = (forward(true)? - forward(false)?).abs();
    Ok(vec![
        Check::at_most("reparam/value_identity", value_gap.max(output_gap), IDENTITY_TOLERANCE),
        Check::below("reparam/uniform_sensitivity_null", null_grad, IDENTITY_TOLERANCE),
    ])
}

/// Generators of masked-off layers must get no gradient at all.
pub fn mask_purity_check(fx: &Fixture) -> Result<Check> {
    let masks = [true, false, true, false, true];
    let mut tape = Tape::new();
    let bound = fx.backbone.bind(&mut tape, false)?;
    let gens = fx.net.bind_generators(&mut tape, true);
    let alpha = tape.param(fx.net.gates.as_tensor());
    let a_hat = gate_values(&mut tape, alpha, true)?;
    let batch = Batch::new(fx.tokens.iter().map(|t| t.as_slice()).collect(), &fx.backbone.config, 2)?;
    let cfg = HyperNetConfig {
        lambda_c: 0.0,
        ..fx.net.config.clone()
    };
    let loss = search_objective(&mut tape, &bound, &gens, a_hat, &cfg, &masks, &batch, &fx.labels, None)?;
    let g = tape.backward(loss.total)?;
    let leaks = gens
        .iter()
        .zip(masks)
        .filter(|(gen, on)| !on && gen.vars().iter().any(|&v| g.has_path(v)))
        .count();
    Ok(Check::at_most("hypernet/mask_purity", leaks as f64, 0.0))
}

/// Backbone values bitwise unchanged across a short search; the search loop
/// itself rejects any step whose gradient reaches a frozen weight.
pub fn frozen_check(fx: &Fixture, seed: u64) -> Result<Check> {
    let spec = TaskSpec {
        name: "verify".into(),
        rule: Rule::FixedMajority { first: 5, second: 9 },
        seq_len: 8,
        vocab: 16,
        train: 12,
        dev: 2,
        test: 2,
        data_seed: seed,
        visibility_window: None,
    };
    let data = Dataset::generate(&spec)?;
    let before = fx.backbone.clone();
    let cfg = SearchConfig {
        budget: Budget::Steps(6),
        batch_size: 4,
        ..SearchConfig::default()
    };
    let cache = PrefixCache::new(&fx.backbone, fx.net.config.generator.l);
    let r = search(&fx.backbone, &cache, &fx.net.config, &cfg, &data.train, seed, None);
    let intact = r.is_ok() && fx.backbone == before;
    Ok(Check::at_most("backbone/frozen_contract", f64::from(u8::from(!intact)), 0.0))
}

pub fn phm_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, "verify/phm");
    let mut count_miss = 0usize;
    let mut gap: f64 = 0.0;
    for (n, i, o) in [(1, 8, 4), (2, 8, 4), (4, 32, 8), (4, 8, 32), (8, 64, 16), (3, 9, 6)] {
        let layer = PhmLinear::init(n, i, o, &mut rng)?;
        count_miss += usize::from(layer.parameter_count() != PhmLinear::expected_parameter_count(n, i, o));
        let x = normal_tensor(&mut rng, 5, i, 1.0);
        let dense = x.matmul(&layer.effective_weight())?;
        gap = gap.max(dense.max_abs_diff(&layer.forward_blocks(&x)?));
    }
    Ok(vec![
        Check::at_most("phm/parameter_count", count_miss as f64, 0.0),
        Check::below("phm/dual_path", gap, IDENTITY_TOLERANCE),
    ])
}

/// Runs every check with the standard re-parameterization.
pub fn run_battery(seed: u64) -> Result<Report> {
    run_battery_with(seed, &reparameterize)
}

/// As [`run_battery`], with a substitute re-parameterization (mutation tests).
pub fn run_battery_with(seed: u64, reparam: &Reparam) -> Result<Report> {
    let start = Instant::now();
    let fx = Fixture::new(seed)?;
    let mut checks = op_checks(seed)?;
    checks.extend(model_checks(&fx)?);
    checks.push(closed_form_check(reparam, seed, &fx)?);
    checks.extend(reparam_checks(&fx, seed)?);
    checks.push(mask_purity_check(&fx)?);
    checks.push(frozen_check(&fx, seed)?);
    checks.extend(phm_checks(seed)?);
    Ok(Report {
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    })
}
