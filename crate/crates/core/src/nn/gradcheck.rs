//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to verify.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients near
/// zero are compared absolutely at the `1e-3` scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn graph(store: Option<&ParamStore>) -> Graph<'_> {
    match store {
        Some(s) => Graph::with_params(s).train(0),
        None => Graph::new().train(0),
    }
}

/// Builds the function on a fresh graph (training mode, fixed dropout seed)
/// and returns the scalar it produces.
fn eval<F>(store: Option<&ParamStore>, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = graph(store);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic<F>(store: Option<&ParamStore>, inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = graph(store);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect())
}

/// Central-difference gradients of `f` with respect to every input.
pub fn numeric<F>(store: Option<&ParamStore>, inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for (k, slot) in grad.iter_mut().enumerate() {
            let x0 = work[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(store, &work, f)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(store, &work, f)?;
            work[i].data_mut()[k] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Maximum [`relative_error`] between analytic and central-difference
/// gradients over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    max_relative_error_with(None, inputs, f)
}

/// As [`max_relative_error`], for functions that also read model parameters
/// from `store` (held fixed).
pub fn max_relative_error_with<F>(store: Option<&ParamStore>, inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let a = analytic(store, inputs, &f)?;
    let n = numeric(store, inputs, &f, STEP)?;
    Ok(a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max))
}

/// Compares the analytic gradient of `f` with central differences at the
/// selected `(parameter, element)` coordinates. Returns the maximum
/// [`relative_error`] and the analytic values.
pub fn param_relative_error<F>(store: &ParamStore, coords: &[(ParamId, usize)], f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store).train(0);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        let mut tmp = store.clone();
        tmp.zero_grad();
        grads.accumulate_into(&mut tmp);
        coords
            .iter()
            .map(|&(id, k)| tmp.get(id).grad.data()[k])
            .collect::<Vec<_>>()
    };
    let mut work = store.clone();
    let mut err: f64 = 0.0;
    for (&(id, k), &a) in coords.iter().zip(&analytic) {
        let x0 = work.get(id).value.data()[k];
        let mut at = |x: f64| -> Result<f64> {
            work.get_mut(id).value.data_mut()[k] = x;
            let mut g = Graph::with_params(&work).train(0);
            let out = f(&mut g)?;
            Ok(g.value(out).item())
        };
        let fp = at(x0 + STEP)?;
        let fm = at(x0 - STEP)?;
        work.get_mut(id).value.data_mut()[k] = x0;
        err = err.max(relative_error(a, (fp - fm) / (2.0 * STEP)));
    }
    Ok((err, analytic))
}
