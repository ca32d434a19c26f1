//! Nucleus sampling and autoregressive generation.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::model::{Model, ModelError};

/// Slack on the cumulative-probability test, absorbing softmax rounding.
pub const NUCLEUS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("nucleus p must lie in (0, 1], got {0}")]
    BadP(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("logits must be finite and non-empty")]
    BadLogits,
    #[error("primer of {len} tokens leaves no room within max_len {max_len}")]
    PrimerTooLong { len: usize, max_len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn softmax_with_temperature<T: Scalar>(logits: &[T], temperature: f64) -> Result<Vec<f64>, SampleError> {
    if !(temperature > 0.0) {
        return Err(SampleError::BadTemperature(temperature));
    }
    let xs: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN) / temperature).collect();
    if xs.is_empty() || xs.iter().any(|v| !v.is_finite()) {
        return Err(SampleError::BadLogits);
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Smallest highest-probability prefix whose mass reaches `p`, renormalized.
/// Ties in probability keep the lower id first.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<(usize, f64)>, SampleError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(SampleError::BadP(p));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for id in order {
        kept.push(id);
        mass += probs[id];
        if mass >= p - NUCLEUS_TOLERANCE {
            break;
        }
    }
    Ok(kept.into_iter().map(|id| (id, probs[id] / mass)).collect())
}

pub fn nucleus_sample<T: Scalar, R: Rng>(
    logits: &[T],
    p: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<usize, SampleError> {
    let probs = softmax_with_temperature(logits, temperature)?;
    let support = nucleus_filter(&probs, p)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, q) in &support {
        acc += q;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(support.last().map_or(0, |&(id, _)| id))
}

/// Highest logit; the lowest id wins ties.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Nucleus { p: f64, temperature: f64 },
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::Nucleus { p: 0.9, temperature: 1.0 }
    }
}

/// Extends `primer` one token at a time until `eos` or `max_new` tokens,
/// returning only the new tokens (without the final EOS).
pub fn generate<T: Scalar, R: Rng>(
    model: &Model<T>,
    primer: &[u32],
    decoding: Decoding,
    max_new: usize,
    eos: u32,
    rng: &mut R,
) -> Result<Vec<u32>, SampleError> {
    let max_len = model.config.max_len;
    if primer.is_empty() || primer.len() >= max_len {
        return Err(SampleError::PrimerTooLong { len: primer.len(), max_len });
    }
    let mut seq = primer.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < max_len {
        let logits = model.next_logits(&seq)?;
        let next = match decoding {
            Decoding::Greedy => argmax(&logits),
            Decoding::Nucleus { p, temperature } => nucleus_sample(&logits, p, temperature, rng)?,
        } as u32;
        if next == eos {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_keeps_smallest_prefix() {
        let kept = nucleus_filter(&[0.05, 0.5, 0.15, 0.3], 0.8).unwrap();
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![1, 3]);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert_eq!(nucleus_filter(&[0.2, 0.8], 1.0).unwrap().len(), 2);
        assert!(nucleus_filter(&[1.0], 0.0).is_err());
    }

    #[test]
    fn low_temperature_is_argmax() {
        let mut rng = rand::rngs::mock::StepRng::new(u64::MAX / 2, 1);
        let logits = [0.1f64, 0.3, 0.2];
        assert_eq!(nucleus_sample(&logits, 1.0, 1e-4, &mut rng).unwrap(), 1);
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
