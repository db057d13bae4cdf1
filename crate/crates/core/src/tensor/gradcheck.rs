//! Central finite-difference gradient checks.
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of every backward rule it checks. Errors are measured per
//! tensor as `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, with
//! both norms below `1e-10` counting as agreement.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Name (parameter path or `input[i]`) of the worst tensor.
    pub worst: String,
    pub per_tensor: Vec<(String, f64)>,
}

impl GradReport {
    fn from(per_tensor: Vec<(String, f64)>) -> Self {
        let (worst, max_rel_error) = per_tensor
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
        Self {
            max_rel_error,
            worst,
            per_tensor,
        }
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Checks the gradients of every trainable parameter in `store` for the
/// scalar loss built by `f`.
pub fn check_params<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::differentiable(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let mut per = Vec::new();
    for (id, name) in ids {
        let n = store.value(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per.push((name, relative_error(&analytic, &numeric)));
    }
    Ok(GradReport::from(per))
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::differentiable(store);
    let loss = f(&mut g)?;
    Ok(scalar(&g, loss))
}

/// Checks gradients with respect to free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let value = scalar(&g, loss);
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .map(|v| grads.leaf(*v).cloned().expect("input gradient"))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = run(inputs)?;
    let mut per = Vec::new();
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        let mut numeric = vec![0.0; xs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let plus = forward_only(&xs, &f)?;
            xs[k].data_mut()[i] = orig - h;
            let minus = forward_only(&xs, &f)?;
            xs[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per.push((format!("input[{k}]"), relative_error(analytic[k].data(), &numeric)));
    }
    Ok(GradReport::from(per))
}

fn forward_only<F>(xs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(scalar(&g, loss))
}
