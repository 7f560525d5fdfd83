//! Dense array arithmetic, probability utilities, and gradient verification.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape, LOG_CLAMP};
pub use tensor::{euclidean, l2_normalized, Tensor};

use crate::error::{Error, Result};

/// Temperature-scaled softmax of a logit vector.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of empty logits".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Standard deviation with the population convention (divide by N).
pub fn population_std(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("std of empty sequence".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let msd = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(msd.sqrt())
}

/// Kullback-Leibler divergence KL(p || q) in nats. Probabilities are clamped
/// at [`LOG_CLAMP`] before logarithms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.max(LOG_CLAMP).ln() - qi.max(LOG_CLAMP).ln());
        }
    }
    Ok(kl)
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked_params: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Entries whose analytic and numeric gradients are both below this floor
/// contribute only to the absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Checks an analytic gradient of a deterministic scalar function against
/// central finite differences with the given step.
pub fn grad_check(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    params: &Tensor,
    analytic: &Tensor,
    step: f64,
) -> Result<GradReport> {
    if step <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    if params.shape() != analytic.shape() {
        return Err(Error::Shape("gradient shape differs from parameters".into()));
    }
    if params.is_empty() {
        return Err(Error::Domain("grad_check needs at least one parameter".into()));
    }
    let mut work = params.clone();
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params.data()[i];
        work.data_mut()[i] = orig + step;
        let up = f(&work)?;
        work.data_mut()[i] = orig - step;
        let down = f(&work)?;
        work.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Eval(format!("non-finite loss at parameter {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        let denom = a.abs().max(numeric.abs());
        if denom > REL_FLOOR {
            max_rel = max_rel.max(abs / denom);
        }
    }
    Ok(GradReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        checked_params: params.len(),
    })
}
