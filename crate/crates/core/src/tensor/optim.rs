use super::ParamStore;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Updates every trainable parameter from its accumulated gradient,
    /// then clears the gradients. Frozen parameters are left alone.
    pub fn step(&self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().map(|(_, p)| p).find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in params.iter_mut() {
            if !p.trainable {
                p.grad = None;
                continue;
            }
            let g = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let m = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g[i];
                let v = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.adam_m[i] = m;
                p.adam_v[i] = v;
                data[i] -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}
