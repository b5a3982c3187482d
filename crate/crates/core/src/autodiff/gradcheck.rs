//! Finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-6;

/// Gradients keyed by parameter name, in sorted order.
pub type NamedGrads = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Gradient of `f` at `params` via the tape.
pub fn analytic_gradient<F>(f: &F, params: &ParamStore) -> Result<NamedGrads>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    if !g.scalar(loss)?.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let mut store = params.clone();
    g.backward(loss, &mut store)?;
    Ok(store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(name, p)| {
            let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            (name.to_string(), grad)
        })
        .collect())
}

/// Central-difference gradient `(f(θ+h) − f(θ−h)) / 2h` for every trainable
/// coordinate.
pub fn numeric_gradient<F>(f: &F, params: &ParamStore, h: f64) -> Result<NamedGrads>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = params.clone();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut out = NamedGrads::new();
    for name in names {
        let len = work.get(&name)?.len();
        let mut grad = Vec::with_capacity(len);
        for i in 0..len {
            let orig = work.get(&name)?.values()[i];
            work.get_mut(&name)?.values_mut()[i] = orig + h;
            let plus = evaluate(f, &work)?;
            work.get_mut(&name)?.values_mut()[i] = orig - h;
            let minus = evaluate(f, &work)?;
            work.get_mut(&name)?.values_mut()[i] = orig;
            grad.push((plus - minus) / (2.0 * h));
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// `max |a − n| / max(|a|, |n|, 1e-6)` over all coordinates.
pub fn compare(analytic: &NamedGrads, numeric: &NamedGrads) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, a) in analytic {
        let n = numeric
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no numeric gradient for {name:?}")))?;
        if n.len() != a.len() {
            return Err(Error::dim("grad_check", format!("{name}: {} vs {}", a.len(), n.len())));
        }
        for (i, (&ai, &ni)) in a.iter().zip(n).enumerate() {
            let err = (ai - ni).abs() / ai.abs().max(ni.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Checks the tape gradient of the scalar built by `f` against central
/// differences with step `h`.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let numeric = numeric_gradient(&f, params, h)?;
    let analytic = analytic_gradient(&f, params)?;
    compare(&analytic, &numeric)
}
