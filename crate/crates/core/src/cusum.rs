//! The calibration CUSUM statistic.
//!
//! Each batch contributes the log-likelihood ratio
//! `W_t = ln f_u(y_t; delta_a, gamma_a) - ln f_c(y_t)` and the chart keeps
//! `S_t = max(0, S_{t-1} + W_t)` starting from `S_0 = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probability::{bernoulli_log_mass, LloParams, TimeBatch};
use crate::scalar::{clamp_probability, Scalar};

/// Named one-sided alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChartLabel {
    /// `delta_a < 1, gamma_a = 1`: events rarer than predicted.
    ShiftDown,
    /// `delta_a > 1, gamma_a = 1`: events more common than predicted.
    ShiftUp,
    /// `delta_a = 1, gamma_a < 1`: predictions too spread out.
    ScaleDown,
    /// `delta_a = 1, gamma_a > 1`: predictions not spread out enough.
    ScaleUp,
    Custom,
}

impl ChartLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ShiftDown => "shift-down",
            Self::ShiftUp => "shift-up",
            Self::ScaleDown => "scale-down",
            Self::ScaleUp => "scale-up",
            Self::Custom => "custom",
        }
    }
}

impl fmt::Display for ChartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChartLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift-down" => Ok(Self::ShiftDown),
            "shift-up" => Ok(Self::ShiftUp),
            "scale-down" => Ok(Self::ScaleDown),
            "scale-up" => Ok(Self::ScaleUp),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown chart label {other:?}"))),
        }
    }
}

/// Everything needed to run one one-sided chart with dynamic limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec<T> {
    alternative: LloParams<T>,
    alpha: T,
    replicates: usize,
    seed: u64,
    label: ChartLabel,
}

impl<T: Scalar> ChartSpec<T> {
    /// Validating constructor. The replicate count is checked when the
    /// ensemble is created.
    pub fn new(
        label: ChartLabel,
        alternative: LloParams<T>,
        alpha: T,
        replicates: usize,
        seed: u64,
    ) -> Result<Self> {
        if alternative.is_identity() {
            return Err(Error::Config(
                "chart alternative must differ from (delta_a, gamma_a) = (1, 1)".into(),
            ));
        }
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let (d, g, one) = (alternative.delta(), alternative.gamma(), T::one());
        let consistent = match label {
            ChartLabel::ShiftDown => d < one && g == one,
            ChartLabel::ShiftUp => d > one && g == one,
            ChartLabel::ScaleDown => d == one && g < one,
            ChartLabel::ScaleUp => d == one && g > one,
            ChartLabel::Custom => true,
        };
        if !consistent {
            return Err(Error::Config(format!(
                "{label} chart is inconsistent with delta_a={d}, gamma_a={g}"
            )));
        }
        Ok(Self {
            alternative,
            alpha,
            replicates,
            seed,
            label,
        })
    }

    pub fn shift_up(delta_a: T, alpha: T, replicates: usize, seed: u64) -> Result<Self> {
        Self::new(ChartLabel::ShiftUp, LloParams::new(delta_a, T::one())?, alpha, replicates, seed)
    }

    pub fn shift_down(delta_a: T, alpha: T, replicates: usize, seed: u64) -> Result<Self> {
        Self::new(ChartLabel::ShiftDown, LloParams::new(delta_a, T::one())?, alpha, replicates, seed)
    }

    pub fn scale_up(gamma_a: T, alpha: T, replicates: usize, seed: u64) -> Result<Self> {
        Self::new(ChartLabel::ScaleUp, LloParams::new(T::one(), gamma_a)?, alpha, replicates, seed)
    }

    pub fn scale_down(gamma_a: T, alpha: T, replicates: usize, seed: u64) -> Result<Self> {
        Self::new(ChartLabel::ScaleDown, LloParams::new(T::one(), gamma_a)?, alpha, replicates, seed)
    }

    pub fn custom(alternative: LloParams<T>, alpha: T, replicates: usize, seed: u64) -> Result<Self> {
        Self::new(ChartLabel::Custom, alternative, alpha, replicates, seed)
    }

    /// The four standard charts for shift magnitude `delta_mag > 1` and scale
    /// magnitude `gamma_mag > 1`: shift-down uses `1/delta_mag`, scale-down `1/gamma_mag`.
    pub fn standard_four(
        delta_mag: T,
        gamma_mag: T,
        alpha: T,
        replicates: usize,
        seed: u64,
    ) -> Result<Vec<Self>> {
        if !(delta_mag > T::one()) || !(gamma_mag > T::one()) {
            return Err(Error::Config("standard magnitudes must exceed 1".into()));
        }
        Ok(vec![
            Self::shift_down(delta_mag.recip(), alpha, replicates, seed)?,
            Self::shift_up(delta_mag, alpha, replicates, seed.wrapping_add(1))?,
            Self::scale_down(gamma_mag.recip(), alpha, replicates, seed.wrapping_add(2))?,
            Self::scale_up(gamma_mag, alpha, replicates, seed.wrapping_add(3))?,
        ])
    }

    pub fn alternative(&self) -> &LloParams<T> {
        &self.alternative
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> ChartLabel {
        self.label
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    /// Log-likelihood ratio of one batch under this chart's alternative.
    pub fn increment(&self, batch: &TimeBatch<T>) -> T {
        increment(batch, &self.alternative)
    }
}

/// Per-observation log-likelihood ratio contributions for `y = 1` and `y = 0`.
///
/// Shared by the observed chart and the replicate simulation so both use the
/// same clamping path.
#[inline]
pub fn observation_increments<T: Scalar>(p: T, alternative: &LloParams<T>) -> (T, T) {
    let pc = clamp_probability(p);
    let g = alternative.apply_clamped(pc);
    (
        bernoulli_log_mass(g, true) - bernoulli_log_mass(pc, true),
        bernoulli_log_mass(g, false) - bernoulli_log_mass(pc, false),
    )
}

/// `W_t` for a batch: the uncalibrated minus the calibrated log-likelihood.
///
/// Accumulated observation by observation, so the value for a batch equals
/// the sum over its single-observation sub-batches.
pub fn increment<T: Scalar>(batch: &TimeBatch<T>, alternative: &LloParams<T>) -> T {
    batch
        .predictions()
        .iter()
        .zip(batch.outcomes())
        .fold(T::zero(), |acc, (p, &y)| {
            let (on_event, on_non_event) = observation_increments(p.value(), alternative);
            acc + if y { on_event } else { on_non_event }
        })
}

/// One point of the CUSUM path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumValue<T> {
    pub time_index: u64,
    pub w: T,
    pub s: T,
}

impl<T: Scalar> CusumValue<T> {
    /// The zero state before the first batch.
    pub fn initial() -> Self {
        Self {
            time_index: 0,
            w: T::zero(),
            s: T::zero(),
        }
    }
}

impl<T: Scalar> Default for CusumValue<T> {
    fn default() -> Self {
        Self::initial()
    }
}

/// Advance the CUSUM by one batch.
pub fn step<T: Scalar>(prev: &CusumValue<T>, batch: &TimeBatch<T>, spec: &ChartSpec<T>) -> Result<CusumValue<T>> {
    if prev.s < T::zero() || !prev.s.is_finite() {
        return Err(Error::Input(format!("invalid previous statistic {}", prev.s)));
    }
    if batch.time_index() <= prev.time_index {
        return Err(Error::Sequencing(format!(
            "batch t={} does not follow t={}",
            batch.time_index(),
            prev.time_index
        )));
    }
    let w = spec.increment(batch);
    Ok(CusumValue {
        time_index: batch.time_index(),
        w,
        s: (prev.s + w).max(T::zero()),
    })
}

/// One exported chart row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    pub time_index: u64,
    pub n_t: usize,
    pub w: T,
    pub s: T,
    pub limit: T,
    /// `S_t > limit_t` at this step.
    pub signaled: bool,
    /// A signal occurred at an earlier step.
    pub post_signal: bool,
}

/// A chart path and its first signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartTrace<T> {
    pub rows: Vec<TraceRow<T>>,
    pub signal_time: Option<u64>,
}

/// Run a chart over a batch sequence against precomputed limits.
///
/// The trace continues past the first crossing; later rows carry `post_signal`.
pub fn run_chart<T: Scalar>(
    batches: &[TimeBatch<T>],
    spec: &ChartSpec<T>,
    limits: &[T],
) -> Result<ChartTrace<T>> {
    if batches.len() != limits.len() {
        return Err(Error::Input(format!(
            "{} batches but {} limits",
            batches.len(),
            limits.len()
        )));
    }
    let mut state = CusumValue::initial();
    let mut rows = Vec::with_capacity(batches.len());
    let mut signal_time = None;
    for (batch, &limit) in batches.iter().zip(limits) {
        state = step(&state, batch, spec)?;
        let signaled = state.s > limit;
        rows.push(TraceRow {
            time_index: state.time_index,
            n_t: batch.len(),
            w: state.w,
            s: state.s,
            limit,
            signaled,
            post_signal: signal_time.is_some(),
        });
        if signaled && signal_time.is_none() {
            signal_time = Some(state.time_index);
        }
    }
    Ok(ChartTrace { rows, signal_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability::{loglik_calibrated, loglik_uncalibrated};
    use proptest::prelude::*;

    fn spec_up() -> ChartSpec<f64> {
        ChartSpec::shift_up(2.0, 0.005, 100, 1).unwrap()
    }

    #[test]
    fn increment_examples() {
        let b = TimeBatch::from_raw(1, &[0.5], &[true]).unwrap();
        assert!((spec_up().increment(&b) - 0.287_682_072_451_780_9).abs() < 1e-14);
        let b = TimeBatch::from_raw(1, &[0.5], &[false]).unwrap();
        assert!((spec_up().increment(&b) + 0.405_465_108_108_164_4).abs() < 1e-14);
        let b = TimeBatch::from_raw(1, &[0.3, 0.9], &[false, true]).unwrap();
        assert_eq!(increment(&b, &LloParams::identity()), 0.0);
    }

    #[test]
    fn step_examples() {
        let prev = CusumValue { time_index: 0, w: 0.0, s: 0.0 };
        let b = TimeBatch::from_raw(1, &[0.5], &[false]).unwrap();
        assert_eq!(step(&prev, &b, &spec_up()).unwrap().s, 0.0);

        let prev = CusumValue { time_index: 3, w: 0.0, s: 0.5 };
        let b = TimeBatch::from_raw(4, &[0.5], &[true]).unwrap();
        let next = step(&prev, &b, &spec_up()).unwrap();
        assert!((next.s - 0.787_682_072_451_780_9).abs() < 1e-14);
        assert_eq!(next.time_index, 4);

        let b = TimeBatch::from_raw(3, &[0.5], &[true]).unwrap();
        assert!(matches!(step(&prev, &b, &spec_up()), Err(Error::Sequencing(_))));
    }

    #[test]
    fn spec_validation() {
        let id = LloParams::identity();
        assert!(ChartSpec::custom(id, 0.01, 10, 0).is_err());
        assert!(ChartSpec::shift_up(0.5, 0.01, 10, 0).is_err());
        assert!(ChartSpec::scale_down(2.0, 0.01, 10, 0).is_err());
        assert!(ChartSpec::shift_up(2.0, 0.0, 10, 0).is_err());
        assert!(ChartSpec::shift_up(2.0, 1.0, 10, 0).is_err());
        let bad = LloParams::new(2.0, 0.5).unwrap();
        assert!(ChartSpec::new(ChartLabel::ShiftUp, bad, 0.01, 10, 0).is_err());
        assert!(ChartSpec::new(ChartLabel::Custom, bad, 0.01, 10, 0).is_ok());
        let four = ChartSpec::standard_four(2.0, 2.0, 0.01, 10, 0).unwrap();
        let labels: Vec<_> = four.iter().map(|s| s.label()).collect();
        assert_eq!(
            labels,
            [ChartLabel::ShiftDown, ChartLabel::ShiftUp, ChartLabel::ScaleDown, ChartLabel::ScaleUp]
        );
    }

    #[test]
    fn label_round_trip() {
        for l in [ChartLabel::ShiftDown, ChartLabel::ShiftUp, ChartLabel::ScaleDown, ChartLabel::ScaleUp, ChartLabel::Custom] {
            assert_eq!(l.as_str().parse::<ChartLabel>().unwrap(), l);
        }
        assert!("sideways".parse::<ChartLabel>().is_err());
    }

    #[test]
    fn run_chart_signals_and_continues() {
        let batches: Vec<_> = (1..=5)
            .map(|t| TimeBatch::from_raw(t, &[0.5], &[true]).unwrap())
            .collect();
        let limits = vec![0.5; 5];
        let trace = run_chart(&batches, &spec_up(), &limits).unwrap();
        assert_eq!(trace.rows.len(), 5);
        // S = 0.2877, 0.5754, ... crosses 0.5 at t = 2.
        assert_eq!(trace.signal_time, Some(2));
        assert!(!trace.rows[1].post_signal && trace.rows[1].signaled);
        assert!(trace.rows[2].post_signal);
        assert!(run_chart(&batches, &spec_up(), &limits[..4]).is_err());
        let empty = run_chart::<f64>(&[], &spec_up(), &[]).unwrap();
        assert!(empty.rows.is_empty() && empty.signal_time.is_none());
    }

    #[test]
    fn near_identity_increment_vanishes() {
        let b = TimeBatch::from_raw(1, &[0.1f64, 0.6, 0.97], &[true, false, true]).unwrap();
        let near = LloParams::new(1.0 + 1e-9, 1.0 - 1e-9).unwrap();
        assert!(increment(&b, &near).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn increment_is_loglik_difference(
            obs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..16),
            ld in -2.0f64..2.0, g in -2.0f64..3.0
        ) {
            let (ps, ys): (Vec<f64>, Vec<bool>) = obs.into_iter().unzip();
            let b = TimeBatch::from_raw(1, &ps, &ys).unwrap();
            let alt = LloParams::from_log_delta(ld, g).unwrap();
            let direct = loglik_uncalibrated(&b, &alt) - loglik_calibrated(&b);
            prop_assert!((increment(&b, &alt) - direct).abs() < 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn batch_decomposes_into_single_observations(
            obs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..16),
            ld in -2.0f64..2.0, g in 0.1f64..3.0
        ) {
            let alt = LloParams::from_log_delta(ld, g).unwrap();
            let (ps, ys): (Vec<f64>, Vec<bool>) = obs.into_iter().unzip();
            let whole = increment(&TimeBatch::from_raw(1, &ps, &ys).unwrap(), &alt);
            let parts: f64 = ps.iter().zip(&ys)
                .map(|(&p, &y)| increment(&TimeBatch::from_raw(1, &[p], &[y]).unwrap(), &alt))
                .sum();
            prop_assert!((whole - parts).abs() < 1e-10 * (1.0 + whole.abs()));
        }

        #[test]
        fn shift_chart_matches_odds_ratio_cusum(
            obs in proptest::collection::vec((0.001f64..0.999, any::<bool>()), 1..16),
            delta in 0.1f64..10.0
        ) {
            // Risk-adjusted CUSUM weight with odds ratio delta:
            // y ln(delta) - ln(1 - p + delta p).
            let (ps, ys): (Vec<f64>, Vec<bool>) = obs.into_iter().unzip();
            let b = TimeBatch::from_raw(1, &ps, &ys).unwrap();
            let alt = LloParams::new(delta, 1.0).unwrap();
            let odds_ratio: f64 = ps.iter().zip(&ys)
                .map(|(&p, &y)| if y { delta.ln() } else { 0.0 } - (1.0 - p + delta * p).ln())
                .sum();
            prop_assert!((increment(&b, &alt) - odds_ratio).abs() < 1e-9);
        }

        #[test]
        fn statistic_never_negative(
            ws in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..50)
        ) {
            let spec = ChartSpec::scale_down(0.5, 0.01, 10, 0).unwrap();
            let mut state = CusumValue::initial();
            for (i, (p, y)) in ws.into_iter().enumerate() {
                let b = TimeBatch::from_raw(i as u64 + 1, &[p], &[y]).unwrap();
                state = step(&state, &b, &spec).unwrap();
                prop_assert!(state.s >= 0.0);
            }
        }
    }
}
