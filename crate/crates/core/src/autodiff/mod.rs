//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node stores its
//! value, whether it needs a gradient, and the operation that produced it;
//! [`Tape::backward`] sweeps the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede their consumers.
//!
//! Broadcasting is deliberately narrow: equal shapes, a `1×1` scalar against
//! anything, or a `1×c` row against an `r×c` matrix. Everything else is a
//! dimension error.

mod attention;
mod gradcheck;

use std::sync::Arc;

pub use attention::{AttentionCache, AttentionLayout};
pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradient};

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Left operand is `1×1`.
    ScalarLeft,
    /// Right operand is `1×1`.
    ScalarRight,
    /// Right operand is a `1×c` row repeated over the rows of the left.
    RowRight,
    RowLeft,
}

impl Broadcast {
    fn resolve(a: [usize; 2], b: [usize; 2]) -> Option<(Broadcast, [usize; 2])> {
        if a == b {
            Some((Broadcast::Same, a))
        } else if a == [1, 1] {
            Some((Broadcast::ScalarLeft, b))
        } else if b == [1, 1] {
            Some((Broadcast::ScalarRight, a))
        } else if b[0] == 1 && b[1] == a[1] {
            Some((Broadcast::RowRight, a))
        } else if a[0] == 1 && a[1] == b[1] {
            Some((Broadcast::RowLeft, b))
        } else {
            None
        }
    }

    /// Index into the left/right operand data for output flat index `i`.
    #[inline]
    fn index(self, i: usize, cols: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::ScalarLeft => (0, i),
            Broadcast::ScalarRight => (i, 0),
            Broadcast::RowRight => (i, i % cols),
            Broadcast::RowLeft => (i % cols, i),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value copied from another node; no gradient flows back.
    Detach,
    Binary(BinaryOp, Var, Var, Broadcast),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Kron(Var, Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        prompt: Option<(Var, Var)>,
        layout: AttentionLayout,
        cache: AttentionCache,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation for a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when no path exists.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn has_path(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.push_arc(value.into(), requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    /// Same values as `x`, cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.push_arc(value, false, Op::Detach)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (bc, [r, c]) = Broadcast::resolve(av.shape(), bv.shape()).ok_or_else(|| {
            Error::dim(
                "elementwise",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            )
        })?;
        let (ad, bd) = (av.data(), bv.data());
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = (0..r * c)
            .map(|i| {
                let (ia, ib) = bc.index(i, c);
                f(ad[ia], bd[ib])
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(r, c, data)?, rg, Op::Binary(op, a, b, bc)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Relu => |v| v.max(0.0),
            UnaryOp::Tanh => f64::tanh,
        };
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Unary(op, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::AddScalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Transpose(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(xv.rows(), xv.cols(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with variance epsilon `1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.shape() != [1, c] || bv.shape() != [1, c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs width {c}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut normed = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                normed.push(n);
                data.push(n * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.rows(), c, data)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, xv.rows()),
            ));
        }
        let c = xv.cols();
        let out = Tensor::new(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {}", start + len, xv.cols()),
            ));
        }
        let data = xv
            .data()
            .chunks(xv.cols())
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(xv.rows(), len, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::SliceCols(x, start)))
    }

    /// Gathers the listed rows (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::dim(
                "select_rows",
                format!("indices {rows:?} for {} rows", xv.rows()),
            ));
        }
        let data = rows
            .iter()
            .flat_map(|&r| xv.row_slice(r).iter().copied())
            .collect();
        let out = Tensor::new(rows.len(), xv.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::SelectRows(x, rows.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::dim("concat_rows", format!("width {} vs {c}", pv.cols())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::new(r, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).kron(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, rg, Op::Kron(a, b))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Contract(format!(
                "mse operands differ in shape: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mse(a, b)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if targets.len() != lv.rows() || targets.iter().any(|&t| t >= c) {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), lv.shape()),
            ));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = 0.0;
        for (row, &t) in lv.data().chunks(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Multi-head attention over `layout.batch` stacked sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × width`. When `prompt` is given as
    /// `(keys, values)` of shape `(batch·prompt_len) × width`, each token
    /// additionally reads its sequence's prompt slots through a second softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prompt: Option<(Var, Var)>,
        layout: AttentionLayout,
    ) -> Result<Var> {
        let rows = layout.batch * layout.seq;
        if layout.width % layout.heads != 0 {
            return Err(Error::dim("attention", "width not divisible by heads"));
        }
        for x in [q, k, v] {
            if self.shape(x) != [rows, layout.width] {
                return Err(Error::dim(
                    "attention",
                    format!("expected {rows}x{}, got {:?}", layout.width, self.shape(x)),
                ));
            }
        }
        if let Some((pk, pv)) = prompt {
            let prow = layout.batch * layout.prompt_len;
            for x in [pk, pv] {
                if self.shape(x) != [prow, layout.width] {
                    return Err(Error::dim(
                        "attention",
                        format!("prompt expected {prow}x{}, got {:?}", layout.width, self.shape(x)),
                    ));
                }
            }
        }
        let pdata = prompt.map(|(pk, pv)| (self.value(pk).data(), self.value(pv).data()));
        let (out, cache) = attention::forward(
            &layout,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            pdata,
        );
        let mut inputs = vec![q, k, v];
        if let Some((pk, pv)) = prompt {
            inputs.extend([pk, pv]);
        }
        let rg = self.rg(&inputs);
        let out = Tensor::new(rows, layout.width, out)?;
        Ok(self.push(
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                prompt,
                layout,
                cache,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Detach) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        let [r, c] = out.shape();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Binary(op, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    let (ia, ib) = bc.index(i, c);
                    let (x, y) = (av.data()[ia], bv.data()[ib]);
                    let (da, db) = match op {
                        BinaryOp::Add => (gi, gi),
                        BinaryOp::Sub => (gi, -gi),
                        BinaryOp::Mul => (gi * y, gi * x),
                        BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[ia] += da;
                    gb[ib] += db;
                }
                let ga = Tensor::new(av.rows(), av.cols(), ga).expect("shape");
                let gb = Tensor::new(bv.rows(), bv.cols(), gb).expect("shape");
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary(op, x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(out.data())
                    .map(|((gi, xi), yi)| match op {
                        UnaryOp::Sigmoid => gi * yi * (1.0 - yi),
                        UnaryOp::Relu => {
                            if *xi > 0.0 {
                                *gi
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Tanh => gi * (1.0 - yi * yi),
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(r, c, data).expect("shape"));
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), bv.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(m, k, ga).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(av.data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(k, n, gb).expect("shape"));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::SoftmaxRows(x) => {
                let mut data = Vec::with_capacity(out.len());
                for (yrow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    data.extend(yrow.iter().zip(grow).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(r, c, data).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(out.len());
                    let mut dxhat = vec![0.0; c];
                    for row in 0..r {
                        let grow = &g.data()[row * c..(row + 1) * c];
                        let nrow = &normed[row * c..(row + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        dx.extend((0..c).map(|j| inv_std[row] * (dxhat[j] - m1 - nrow[j] * m2)));
                    }
                    self.accumulate(grads, *x, Tensor::new(r, c, dx).expect("shape"));
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (grow, nrow) in g.data().chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * nrow[j];
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(1, c, dg).expect("shape"));
                    self.accumulate(grads, *bias, Tensor::new(1, c, db).expect("shape"));
                }
            }
            Op::Sum(x) => {
                let [xr, xc] = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(xr, xc, g.item()));
            }
            Op::Mean(x) => {
                let [xr, xc] = self.shape(*x);
                let n = (xr * xc) as f64;
                self.accumulate(grads, *x, Tensor::filled(xr, xc, g.item() / n));
            }
            Op::SliceRows(x, start) => {
                let [xr, xc] = self.shape(*x);
                let mut data = vec![0.0; xr * xc];
                data[start * xc..(start + r) * xc].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(xr, xc, data).expect("shape"));
            }
            Op::SliceCols(x, start) => {
                let [xr, xc] = self.shape(*x);
                let mut data = vec![0.0; xr * xc];
                for (i, grow) in g.data().chunks(c).enumerate() {
                    data[i * xc + start..i * xc + start + c].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, Tensor::new(xr, xc, data).expect("shape"));
            }
            Op::SelectRows(x, rows) => {
                let [xr, xc] = self.shape(*x);
                let mut data = vec![0.0; xr * xc];
                for (grow, &src) in g.data().chunks(c).zip(rows) {
                    for (d, v) in data[src * xc..(src + 1) * xc].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xr, xc, data).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.shape(p)[0];
                    let data = g.data()[offset * c..(offset + pr) * c].to_vec();
                    self.accumulate(grads, p, Tensor::new(pr, c, data).expect("shape"));
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    let data = g
                        .data()
                        .chunks(c)
                        .flat_map(|row| row[offset..offset + pc].iter().copied())
                        .collect();
                    self.accumulate(grads, p, Tensor::new(r, pc, data).expect("shape"));
                    offset += pc;
                }
            }
            Op::Kron(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = (bv.rows(), bv.cols());
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..av.rows() {
                    for j in 0..av.cols() {
                        let s = av.get(i, j);
                        let mut acc = 0.0;
                        for rr in 0..p {
                            for cc in 0..q {
                                let gi = g.get(i * p + rr, j * q + cc);
                                acc += gi * bv.get(rr, cc);
                                gb[rr * q + cc] += gi * s;
                            }
                        }
                        ga[i * av.cols() + j] = acc;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.rows(), av.cols(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(p, q, gb).expect("shape"));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / av.len() as f64;
                let da: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| k * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                let [ar, ac] = av.shape();
                self.accumulate(grads, *a, Tensor::new(ar, ac, da).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(ar, ac, db).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let [lr, lc] = self.shape(*logits);
                let k = g.item() / lr as f64;
                let mut data: Vec<f64> = probs.iter().map(|p| p * k).collect();
                for (i, &t) in targets.iter().enumerate() {
                    data[i * lc + t] -= k;
                }
                self.accumulate(grads, *logits, Tensor::new(lr, lc, data).expect("shape"));
            }
            Op::Attention {
                q,
                k,
                v,
                prompt,
                layout,
                cache,
            } => {
                let pdata = prompt.map(|(pk, pv)| (self.value(pk).data(), self.value(pv).data()));
                let ag = attention::backward(
                    layout,
                    cache,
                    g.data(),
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    pdata,
                );
                let rows = layout.batch * layout.seq;
                let w = layout.width;
                self.accumulate(grads, *q, Tensor::new(rows, w, ag.dq).expect("shape"));
                self.accumulate(grads, *k, Tensor::new(rows, w, ag.dk).expect("shape"));
                self.accumulate(grads, *v, Tensor::new(rows, w, ag.dv).expect("shape"));
                if let (Some((pk, pv)), Some(dpk), Some(dpv)) = (prompt, ag.dpk, ag.dpv) {
                    let prow = layout.batch * layout.prompt_len;
                    self.accumulate(grads, *pk, Tensor::new(prow, w, dpk).expect("shape"));
                    self.accumulate(grads, *pv, Tensor::new(prow, w, dpv).expect("shape"));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Attention probabilities of the token channel, `[batch][head][query][key]`.
/// Exposed for row-sum checks.
pub fn attention_probs(layout: &AttentionLayout, q: &Tensor, k: &Tensor) -> Vec<f64> {
    let (_, cache) = attention::forward(layout, q.data(), k.data(), k.data(), None);
    cache.token_probs
}

#[cfg(test)]
mod tests;
