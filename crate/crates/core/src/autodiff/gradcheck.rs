use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Central-difference gradient of `f` at `x`.
///
/// Uses the fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
/// with `h = eps · max(1, |x_i|)`.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite-difference eps must be positive".into()));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let h = eps * x0.abs().max(1.0);
        let mut at = |offset: f64, probe: &mut Tensor| -> Result<f64> {
            probe.data_mut()[i] = x0 + offset;
            eval(&mut f, probe)
        };
        let f2p = at(2.0 * h, &mut probe)?;
        let f1p = at(h, &mut probe)?;
        let f1m = at(-h, &mut probe)?;
        let f2m = at(-2.0 * h, &mut probe)?;
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h);
    }
    Ok(out)
}

/// Worst entrywise relative error between the tape gradient of `f` at `x`
/// and its finite-difference estimate. The denominator is floored at `1e-8`.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.get(xv);
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
