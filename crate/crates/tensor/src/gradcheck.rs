//! Central finite-difference checks for analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default step of the central-difference checks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Gradient norms below this are compared absolutely rather than relatively,
/// since finite-difference round-off (≈1e-10 per component at `ε = 1e-6`)
/// would otherwise dominate.
pub const NORM_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares analytic parameter gradients of the scalar built by `loss`
/// against central differences for every parameter in `ids`.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, loss: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        ids.iter()
            .map(|&id| grads.param_or_zero(id, store.get(id).len()))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut out = Vec::with_capacity(ids.len());
    for (&id, a) in ids.iter().zip(&analytic) {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(ParamCheck {
            name: store.entry(id).name.clone(),
            rel_error: relative_error(a, &numeric),
            analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}

/// Same check for free inputs: `loss` receives one leaf per tensor in `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        let grads = g.backward(l)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (j, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[j].data()[i];
            work[j].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[j].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[j].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(relative_error(a, &numeric));
    }
    Ok(out)
}
