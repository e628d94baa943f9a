//! Log-odds transforms, the linear-log-odds (LLO) adjustment, and Bernoulli
//! log-likelihoods under the calibrated and LLO-miscalibrated hypotheses.
//!
//! Every probability passes through [`clamp_probability`] before a log or
//! log-odds transform, so all likelihoods stay finite even for scores of
//! exactly zero or one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{clamp_probability, inv_logit, logit, Scalar};

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Probability<T>(T);

impl<T: Scalar> Probability<T> {
    pub fn new(value: T) -> Result<Self> {
        if !value.is_finite() || value < T::zero() || value > T::one() {
            return Err(Error::ParameterDomain(format!(
                "probability must lie in [0, 1], got {value}"
            )));
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn value(self) -> T {
        self.0
    }

    /// The value clamped into `[eps, 1 - eps]`.
    #[inline]
    pub fn clamped(self) -> T {
        clamp_probability(self.0)
    }

    /// `1 - p`.
    #[inline]
    pub fn complement(self) -> Self {
        Self(T::one() - self.0)
    }
}

/// Shift (`delta`) and scale (`gamma`) of the linear-log-odds map
///
/// ```text
/// g(x; delta, gamma) = delta x^gamma / (delta x^gamma + (1 - x)^gamma)
/// ```
///
/// equivalently `logit g = gamma * logit x + ln delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LloParams<T> {
    delta: T,
    gamma: T,
}

impl<T: Scalar> LloParams<T> {
    pub fn new(delta: T, gamma: T) -> Result<Self> {
        if !delta.is_finite() || delta <= T::zero() {
            return Err(Error::ParameterDomain(format!(
                "delta must be finite and positive, got {delta}"
            )));
        }
        if !gamma.is_finite() {
            return Err(Error::ParameterDomain(format!(
                "gamma must be finite, got {gamma}"
            )));
        }
        Ok(Self { delta, gamma })
    }

    /// `(1, 1)`: no adjustment.
    pub fn identity() -> Self {
        Self {
            delta: T::one(),
            gamma: T::one(),
        }
    }

    /// Build from the unconstrained coordinates `(ln delta, gamma)`.
    pub fn from_log_delta(log_delta: T, gamma: T) -> Result<Self> {
        Self::new(log_delta.exp(), gamma)
    }

    #[inline]
    pub fn delta(&self) -> T {
        self.delta
    }

    #[inline]
    pub fn gamma(&self) -> T {
        self.gamma
    }

    #[inline]
    pub fn is_identity(&self) -> bool {
        self.delta == T::one() && self.gamma == T::one()
    }

    /// Parameters of the complementary map: `g(1 - x; 1/delta, gamma) = 1 - g(x; delta, gamma)`.
    pub fn complement(&self) -> Self {
        Self {
            delta: self.delta.recip(),
            gamma: self.gamma,
        }
    }

    /// Adjust an already clamped probability.
    ///
    /// The identity short-circuits so that calibrated and identity-adjusted
    /// likelihoods agree bit for bit.
    #[inline]
    pub(crate) fn apply_clamped(&self, x: T) -> T {
        if self.is_identity() {
            x
        } else {
            inv_logit(self.gamma * logit(x) + self.delta.ln())
        }
    }
}

/// Apply the LLO adjustment `g(x; delta, gamma)` to a single probability.
///
/// The input is clamped first; the map is computed in the log-odds domain.
/// Only the output of a non-identity map can reach exactly 0 or 1 (at
/// extreme log-odds); downstream likelihoods clamp again.
pub fn llo_adjust<T: Scalar>(x: Probability<T>, params: &LloParams<T>) -> Probability<T> {
    Probability(params.apply_clamped(x.clamped()))
}

/// Predictions and binary outcomes observed at one time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBatch<T> {
    time_index: u64,
    predictions: Vec<Probability<T>>,
    outcomes: Vec<bool>,
}

impl<T: Scalar> TimeBatch<T> {
    pub fn new(
        time_index: u64,
        predictions: Vec<Probability<T>>,
        outcomes: Vec<bool>,
    ) -> Result<Self> {
        if time_index == 0 {
            return Err(Error::Input("time index must be positive".into()));
        }
        if predictions.is_empty() {
            return Err(Error::Input(format!("batch at t={time_index} is empty")));
        }
        if predictions.len() != outcomes.len() {
            return Err(Error::Input(format!(
                "batch at t={time_index}: {} predictions but {} outcomes",
                predictions.len(),
                outcomes.len()
            )));
        }
        Ok(Self {
            time_index,
            predictions,
            outcomes,
        })
    }

    /// Convenience constructor from raw values.
    pub fn from_raw(time_index: u64, predictions: &[T], outcomes: &[bool]) -> Result<Self> {
        let predictions = predictions
            .iter()
            .map(|&p| Probability::new(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(time_index, predictions, outcomes.to_vec())
    }

    #[inline]
    pub fn time_index(&self) -> u64 {
        self.time_index
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    /// Always false for a constructed batch; present for clippy's sake.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn predictions(&self) -> &[Probability<T>] {
        &self.predictions
    }

    pub fn outcomes(&self) -> &[bool] {
        &self.outcomes
    }
}

/// Bernoulli log mass of one outcome at a probability that is clamped here.
#[inline]
pub(crate) fn bernoulli_log_mass<T: Scalar>(p: T, y: bool) -> T {
    let p = clamp_probability(p);
    if y {
        p.ln()
    } else {
        (-p).ln_1p()
    }
}

/// `sum_i y_i ln p_i + (1 - y_i) ln(1 - p_i)` over the batch (clamped `p`).
pub fn loglik_calibrated<T: Scalar>(batch: &TimeBatch<T>) -> T {
    batch
        .predictions
        .iter()
        .zip(&batch.outcomes)
        .map(|(p, &y)| bernoulli_log_mass(p.value(), y))
        .sum()
}

/// Log-likelihood of the batch when the event probability is `g(p; params)`.
pub fn loglik_uncalibrated<T: Scalar>(batch: &TimeBatch<T>, params: &LloParams<T>) -> T {
    batch
        .predictions
        .iter()
        .zip(&batch.outcomes)
        .map(|(&p, &y)| bernoulli_log_mass(llo_adjust(p, params).value(), y))
        .sum()
}

/// Log-likelihood of parallel prediction/outcome slices under `params`.
pub fn loglik_slices<T: Scalar>(
    predictions: &[Probability<T>],
    outcomes: &[bool],
    params: &LloParams<T>,
) -> Result<T> {
    if predictions.len() != outcomes.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} outcomes",
            predictions.len(),
            outcomes.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(outcomes)
        .map(|(&p, &y)| bernoulli_log_mass(llo_adjust(p, params).value(), y))
        .sum())
}
