//! Local decoding policies: temperature softmax, nucleus (top-p) truncation,
//! linear temperature decay and next-token entropy.
//!
//! These are only consulted when a locally hosted logit stream is available;
//! remote endpoints apply their own sampling from the `temperature`/`top_p`
//! request fields.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("logit vector is empty")]
    EmptyLogits,
    #[error("logit at index {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("top-p must lie in (0, 1], got {0}")]
    BadTopP(f64),
    #[error("decay schedule needs positive temperatures and steps >= 1")]
    BadSchedule,
}

/// Unnormalised log-probabilities over a vocabulary of size >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self, SamplingError> {
        if logits.is_empty() {
            return Err(SamplingError::EmptyLogits);
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(SamplingError::NonFiniteLogit(i));
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `softmax(logits / temperature)` with max-subtraction.
pub fn temperature_transform(
    logits: &LogitVector,
    temperature: f64,
) -> Result<Vec<f64>, SamplingError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(SamplingError::BadTemperature(temperature));
    }
    let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .0
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Smallest set of highest-probability indices whose cumulative mass reaches `p`.
///
/// Indices come back in selection order (descending probability, lower index
/// first on ties).
pub fn top_p_truncate(probs: &[f64], p: f64) -> Result<Vec<usize>, SamplingError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(SamplingError::BadTopP(p));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cumulative = 0.0;
    for (taken, &idx) in order.iter().enumerate() {
        cumulative += probs[idx];
        if cumulative >= p {
            order.truncate(taken + 1);
            return Ok(order);
        }
    }
    // Rounding left the total just under p: the whole vocabulary is the nucleus.
    Ok(order)
}

/// Linear temperature schedule from `t_start` at step 0 to `t_end` at `steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: u32,
}

impl DecaySchedule {
    pub fn new(t_start: f64, t_end: f64, steps: u32) -> Result<Self, SamplingError> {
        let sched = Self {
            t_start,
            t_end,
            steps,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// 10.0 down to 1.2 over the first 50 output tokens.
    pub fn standard() -> Self {
        Self {
            t_start: 10.0,
            t_end: 1.2,
            steps: 50,
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        let ok = self.t_start > 0.0
            && self.t_end > 0.0
            && self.t_start.is_finite()
            && self.t_end.is_finite();
        if ok && self.steps >= 1 {
            Ok(())
        } else {
            Err(SamplingError::BadSchedule)
        }
    }
}

/// Temperature at output step `step`; clamped to `t_end` past the schedule.
pub fn decay_temperature(step: u32, sched: &DecaySchedule) -> f64 {
    if step >= sched.steps {
        return sched.t_end;
    }
    let f = f64::from(step) / f64::from(sched.steps);
    // This form hits both endpoints exactly.
    sched.t_start * (1.0 - f) + sched.t_end * f
}

/// Draw an index from `probs` renormalised over `support`.
///
/// # Panics
/// If `support` is empty.
pub fn sample_token<R: Rng + ?Sized>(probs: &[f64], support: &[usize], rng: &mut R) -> usize {
    assert!(
        !support.is_empty(),
        "sample_token needs a non-empty support"
    );
    if support.len() == 1 {
        return support[0];
    }
    let total: f64 = support.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in support {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    // Only reachable through rounding at the top end.
    *support.last().unwrap()
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn next_token_entropy(probs: &[f64]) -> f64 {
    0.0 - probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.log2())
        .sum::<f64>()
}

/// A complete decoding policy: temperature (optionally decayed) then top-p.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusPolicy {
    pub temperature: f64,
    pub top_p: f64,
    pub decay: Option<DecaySchedule>,
}

impl NucleusPolicy {
    pub fn temperature_at(&self, step: u32) -> f64 {
        match &self.decay {
            Some(s) => decay_temperature(step, s),
            None => self.temperature,
        }
    }

    /// Sample the token for output position `step`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        logits: &LogitVector,
        step: u32,
        rng: &mut R,
    ) -> Result<usize, SamplingError> {
        let probs = temperature_transform(logits, self.temperature_at(step))?;
        let support = top_p_truncate(&probs, self.top_p)?;
        Ok(sample_token(&probs, &support, rng))
    }
}
