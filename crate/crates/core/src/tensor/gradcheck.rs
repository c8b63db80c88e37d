//! Central finite-difference verification of analytic gradients.

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Evaluates the scalar `f` at `x` without recording gradients.
pub fn evaluate<F, Fun>(f: &mut Fun, x: &Tensor<F>) -> Result<F>
where
    F: Real,
    Fun: FnMut(&mut Graph<F>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::Graph(format!("function output {:?} is not scalar", g.shape(out))))
}

/// Analytic gradient of the scalar `f` at `x`.
pub fn analytic_gradient<F, Fun>(f: &mut Fun, x: &Tensor<F>) -> Result<Tensor<F>>
where
    F: Real,
    Fun: FnMut(&mut Graph<F>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    Ok(g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Maximum over coordinates of `|analytic - central| / max(1, |analytic|)`.
pub fn check_gradient<F, Fun>(mut f: Fun, x: &Tensor<F>, step: f64) -> Result<f64>
where
    F: Real,
    Fun: FnMut(&mut Graph<F>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&mut f, x)?;
    let h = F::of(step);
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus = evaluate(&mut f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[k] = orig - h;
        let minus = evaluate(&mut f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[k] = orig;
        let numeric = (plus - minus).as_f64() / (2.0 * step);
        let a = analytic.data()[k].as_f64();
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient check at coordinate {k}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
