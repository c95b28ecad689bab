//! Softmax, cosine similarity and cross-entropy, with the backward pieces
//! used by every loss in the crate.

use super::linalg::{check_finite, dot, norm};
use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Temperature-scaled softmax, `exp((x - max) / τ)` normalized.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::param("softmax of an empty vector"));
    }
    check_finite(logits, "logits")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Cosine similarity. Either argument being zero is a domain error.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !na.is_finite() || !nb.is_finite() {
        return Err(Error::domain("cosine of a non-finite vector"));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine similarity with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `a`, scaled by `upstream` and
/// added into `grad_a`.
pub fn cosine_backward_into(a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    let cos = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let self_coef = cos / (na * na);
    for ((g, &ai), &bi) in grad_a.iter_mut().zip(a).zip(b) {
        *g += upstream * (bi * inv - self_coef * ai);
    }
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::param(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    check_finite(probs, "probabilities")?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Softmax followed by cross-entropy. Returns the loss and the probability
/// vector; the gradient with respect to the raw logits is `(p - onehot) / τ`.
pub fn softmax_cross_entropy(logits: &[f64], temperature: f64, label: usize) -> Result<(f64, Vec<f64>)> {
    let probs = softmax(logits, temperature)?;
    let loss = cross_entropy(&probs, label)?;
    Ok((loss, probs))
}
