//! Central finite-difference check of [`Graph::backward`].
//!
//! The analytic gradient runs at the element type under test; the numeric
//! reference is always evaluated in `f64` so it is not limited by 32-bit
//! round-off.

use super::graph::{Graph, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Denominator floor so that near-zero gradients compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// A scalar-valued function of some parameter tensors, buildable at any
/// precision.
pub trait Probe {
    fn build<T: Element>(&self, graph: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// One entry per scalar parameter, in parameter order.
    pub per_param_errors: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_f64<P: Probe>(probe: &P, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = probe.build(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("gradcheck", "probe output", 1, v.len()));
    }
    Ok(v.data()[0])
}

/// Compares `backward()` at precision `T` against central differences with
/// the given step.
pub fn check_gradients<T: Element, P: Probe>(probe: &P, params: &[Tensor<f64>], step: f64) -> Result<GradCheckReport> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.cast::<T>())).collect();
    let out = probe.build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut errors = Vec::new();
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; params[pi].len()],
        };
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = eval_f64(probe, &work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = eval_f64(probe, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            errors.push(relative_error(a, numeric));
        }
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param_errors: errors,
    })
}
