//! Instance-aware prompt generators built from PHM (Kronecker-sum) layers.

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, StreamRng};
use crate::tensor::Tensor;

/// Linear map whose weight is `Σ_j A_j ⊗ B_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhmLinear {
    pub n: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `n` factors of shape `n × n`.
    pub a: Vec<Tensor>,
    /// `n` factors of shape `(in_dim/n) × (out_dim/n)`.
    pub b: Vec<Tensor>,
}

impl PhmLinear {
    pub fn check_dims(n: usize, in_dim: usize, out_dim: usize) -> Result<()> {
        if n == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::config("phm_n", "dimensions must be positive"));
        }
        if in_dim % n != 0 || out_dim % n != 0 {
            return Err(Error::config(
                "phm_n",
                format!("{n} must divide both {in_dim} and {out_dim}"),
            ));
        }
        Ok(())
    }

    pub fn init(n: usize, in_dim: usize, out_dim: usize, rng: &mut StreamRng) -> Result<Self> {
        Self::check_dims(n, in_dim, out_dim)?;
        let a = (0..n)
            .map(|_| {
                let mut t = normal_tensor(rng, n, n, 0.01);
                for i in 0..n {
                    t.set(i, i, t.get(i, i) + 1.0 / n as f64);
                }
                t
            })
            .collect();
        let b = (0..n)
            .map(|_| normal_tensor(rng, in_dim / n, out_dim / n, 0.02))
            .collect();
        Ok(Self {
            n,
            in_dim,
            out_dim,
            a,
            b,
        })
    }

    /// Closed-form parameter count `n³ + in·out/n`.
    pub fn expected_parameter_count(n: usize, in_dim: usize, out_dim: usize) -> usize {
        n * n * n + in_dim * out_dim / n
    }

    pub fn parameter_count(&self) -> usize {
        self.a.iter().chain(&self.b).map(Tensor::len).sum()
    }

    pub fn effective_weight(&self) -> Tensor {
        let mut w = Tensor::zeros(self.in_dim, self.out_dim);
        for (a, b) in self.a.iter().zip(&self.b) {
            w.add_assign(&a.kron(b));
        }
        w
    }

    /// `x · Σ_j A_j ⊗ B_j` computed block by block without forming the weight.
    pub fn forward_blocks(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim {
            return Err(Error::dim(
                "phm",
                format!("input width {} != {}", x.cols(), self.in_dim),
            ));
        }
        let (bi, bo) = (self.in_dim / self.n, self.out_dim / self.n);
        let mut out = Tensor::zeros(x.rows(), self.out_dim);
        let mut xp = Tensor::zeros(x.rows(), bi);
        for p in 0..self.n {
            for r in 0..x.rows() {
                xp.data_mut()[r * bi..(r + 1) * bi]
                    .copy_from_slice(&x.row_slice(r)[p * bi..(p + 1) * bi]);
            }
            for (a, b) in self.a.iter().zip(&self.b) {
                let z = xp.matmul(b)?;
                for q in 0..self.n {
                    let coef = a.get(p, q);
                    for r in 0..x.rows() {
                        let dst = &mut out.data_mut()[r * self.out_dim + q * bo..r * self.out_dim + (q + 1) * bo];
                        for (d, s) in dst.iter_mut().zip(z.row_slice(r)) {
                            *d += coef * s;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.a.iter().chain(&self.b).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.a.iter_mut().chain(self.b.iter_mut()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPhm {
        BoundPhm {
            a: self.a.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            b: self.b.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }
}

pub struct BoundPhm {
    pub a: Vec<Var>,
    pub b: Vec<Var>,
}

impl BoundPhm {
    pub fn weight(&self, tape: &mut Tape) -> Result<Var> {
        let mut w: Option<Var> = None;
        for (&a, &b) in self.a.iter().zip(&self.b) {
            let k = tape.kron(a, b);
            w = Some(match w {
                Some(acc) => tape.add(acc, k)?,
                None => k,
            });
        }
        w.ok_or_else(|| Error::Contract("PHM layer without factors".into()))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight(tape)?;
        tape.matmul(x, w)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.a.iter().chain(&self.b).copied()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Prompt length.
    pub l: usize,
    /// Bottleneck width.
    pub m: usize,
    /// PHM factor count.
    pub n: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            l: 4,
            m: 8,
            n: 4,
            activation: Activation::Tanh,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, prefix: &str, d: usize) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if self.l == 0 {
            return Err(Error::config(key("l"), "must be positive"));
        }
        if self.m == 0 || self.m >= d {
            return Err(Error::config(key("m"), format!("bottleneck must satisfy 0 < m < d = {d}")));
        }
        PhmLinear::check_dims(self.n, d, self.m).map_err(|_| {
            Error::config(key("n"), format!("{} must divide d = {d} and m = {}", self.n, self.m))
        })
    }

    /// Trainable parameters of one generator at width `d`.
    pub fn parameter_count(&self, d: usize) -> usize {
        2 * PhmLinear::expected_parameter_count(self.n, d, self.m)
    }
}

/// `p = up(g(pool(down(h))))`, producing an `l × d` block per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerator {
    pub down: PhmLinear,
    pub up: PhmLinear,
    pub l: usize,
    pub activation: Activation,
}

/// Row weights mapping `t` positions onto `l` contiguous segment means.
/// The first `t mod l` segments are one row longer; when `t < l` the final
/// row is repeated.
pub fn pool_matrix(t: usize, l: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Input("cannot pool an empty sequence".into()));
    }
    let mut m = Tensor::zeros(l, t);
    if t < l {
        for i in 0..l {
            m.set(i, i.min(t - 1), 1.0);
        }
        return Ok(m);
    }
    let (base, extra) = (t / l, t % l);
    let mut start = 0;
    for i in 0..l {
        let len = base + usize::from(i < extra);
        for j in start..start + len {
            m.set(i, j, 1.0 / len as f64);
        }
        start += len;
    }
    Ok(m)
}

/// Block-diagonal pooling over `batch` stacked sequences of length `t`.
pub fn batch_pool_matrix(batch: usize, t: usize, l: usize) -> Result<Tensor> {
    let one = pool_matrix(t, l)?;
    let mut m = Tensor::zeros(batch * l, batch * t);
    for b in 0..batch {
        for i in 0..l {
            for j in 0..t {
                m.set(b * l + i, b * t + j, one.get(i, j));
            }
        }
    }
    Ok(m)
}

impl PromptGenerator {
    pub fn init(cfg: &GeneratorConfig, d: usize, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate("generator", d)?;
        Ok(Self {
            down: PhmLinear::init(cfg.n, d, cfg.m, rng)?,
            up: PhmLinear::init(cfg.n, cfg.m, d, rng)?,
            l: cfg.l,
            activation: cfg.activation,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.down.parameter_count() + self.up.parameter_count()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.down.tensors();
        v.extend(self.up.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.down.tensors_mut();
        v.extend(self.up.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGenerator {
        BoundGenerator {
            down: self.down.bind(tape, trainable),
            up: self.up.bind(tape, trainable),
            l: self.l,
            activation: self.activation,
        }
    }

    /// Prompt for a single `T × d` hidden-state matrix, computed off-tape.
    pub fn generate(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(h.clone());
        let p = bound.generate(&mut tape, x, 1, h.rows())?;
        Ok(tape.value(p).clone())
    }

    pub fn save_into(&self, archive: &mut TensorArchive, prefix: &str) {
        for (i, t) in self.tensors().into_iter().enumerate() {
            archive.push(format!("{prefix}.{i}"), t.clone());
        }
    }

    pub fn load_from(cfg: &GeneratorConfig, d: usize, archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let mut rng = crate::rng::stream(0, "unused");
        let mut g = Self::init(cfg, d, &mut rng)?;
        for (i, slot) in g.tensors_mut().into_iter().enumerate() {
            let t = archive.get(&format!("{prefix}.{i}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Archive(format!("`{prefix}.{i}` has the wrong shape")));
            }
            *slot = t.clone();
        }
        Ok(g)
    }
}

pub struct BoundGenerator {
    pub down: BoundPhm,
    pub up: BoundPhm,
    l: usize,
    activation: Activation,
}

impl BoundGenerator {
    /// Maps stacked hidden states `(batch·t) × d` to prompts `(batch·l) × d`.
    pub fn generate(&self, tape: &mut Tape, h: Var, batch: usize, t: usize) -> Result<Var> {
        if tape.shape(h)[0] != batch * t {
            return Err(Error::dim(
                "generate_prompt",
                format!("{} rows for {batch} sequences of length {t}", tape.shape(h)[0]),
            ));
        }
        let z = self.down.forward(tape, h)?;
        let pool = tape.constant(batch_pool_matrix(batch, t, self.l)?);
        let z = tape.matmul(pool, z)?;
        let z = match self.activation {
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        };
        self.up.forward(tape, z)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.down.vars().chain(self.up.vars()).collect()
    }
}
