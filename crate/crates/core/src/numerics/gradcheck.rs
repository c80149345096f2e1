use super::graph::{Graph, ParamId, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor of the relative-error denominator, above the round-off of a central
/// difference, so near-zero derivatives are compared absolutely.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Central finite-difference derivative of `f` along coordinate `i` of `point`.
pub fn central_difference<F>(f: &F, point: &Tensor, i: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<f64> {
        let mut p = point.clone();
        p.data_mut()[i] += delta;
        let mut g = Graph::new();
        let x = g.param(ParamId(0), &p);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central differences on every coordinate and returns the maximum
/// relative error.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(ParamId(0), point);
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.param(ParamId(0), point.shape());
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let numeric = central_difference(&f, point, i, eps)?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}
