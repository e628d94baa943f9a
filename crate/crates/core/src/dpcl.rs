//! Dynamic probability control limits (DPCLs).
//!
//! The limit at step `t` is an upper quantile of the CUSUM statistic among
//! `M` simulated replicates whose outcomes are drawn as if the monitored
//! predictions were calibrated. Replicates that exceeded the previous limit
//! are replaced by resampling the survivors, so each limit holds the false
//! alarm rate at `alpha` conditional on no earlier signal.
//!
//! # Conventions
//!
//! * The limit is the `k`-th smallest replicate statistic with
//!   `k = ceil((1 - alpha) M)`. At most `floor(alpha M)` replicates lie
//!   strictly above it.
//! * Survivors are replicates with `S <= limit`; ties stay in the pool.
//! * Randomness is counter based: step `t` keys a [`CounterRng`] with
//!   `derive_seed(seed, t)` and replicate `q` owns positions
//!   `q (n_t + 1) ..`, one for the resampled index and one per trial.
//!   Parallel and serial execution draw identical values.
//!
//! At the first step the replicates are independent, and a statistic
//! exchangeable with them lands strictly above the `k`-th order statistic
//! with probability at most `(M - k + 1) / (M + 1)`. Later steps resample a
//! finite pool, which pushes the extreme order statistics up: with
//! `alpha M` near 1 the realized conditional false alarm rate is a fraction
//! of `alpha`, and it approaches `alpha` as `alpha M` grows (about `0.95 alpha`
//! at `alpha M = 10`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cusum::{observation_increments, ChartSpec};
use crate::error::{Error, Result};
use crate::probability::{LloParams, Probability, TimeBatch};
use crate::rng::{derive_seed, CounterRng};
use crate::scalar::Scalar;

/// Replicates processed per parallel work item.
const CHUNK: usize = 512;

/// Per-observation `W` contributions for `y = 1` and `y = 0` at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTable<T> {
    pub on_event: Vec<T>,
    pub on_non_event: Vec<T>,
}

impl<T: Scalar> IncrementTable<T> {
    pub fn new(predictions: &[Probability<T>], alternative: &LloParams<T>) -> Self {
        let (on_event, on_non_event) = predictions
            .iter()
            .map(|p| observation_increments(p.value(), alternative))
            .unzip();
        Self {
            on_event,
            on_non_event,
        }
    }

    pub fn len(&self) -> usize {
        self.on_event.len()
    }

    pub fn is_empty(&self) -> bool {
        self.on_event.is_empty()
    }

    /// `W` for one outcome vector.
    pub fn increment(&self, outcomes: impl IntoIterator<Item = bool>) -> T {
        outcomes
            .into_iter()
            .enumerate()
            .fold(T::zero(), |acc, (i, y)| {
                acc + if y { self.on_event[i] } else { self.on_non_event[i] }
            })
    }
}

/// Source of the replicate statistics for one step.
///
/// Implementations fill `out` with `max(0, prev + W)` where `prev` is drawn
/// with replacement from `pool` and `W` is the increment of outcomes drawn
/// from the calibrated predictions.
pub trait ReplicateSampler<T: Scalar>: Sync {
    fn propagate(
        &self,
        step: u64,
        pool: &[T],
        predictions: &[Probability<T>],
        table: &IncrementTable<T>,
        out: &mut [T],
    );
}

/// The default Monte Carlo sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonteCarloSampler {
    pub seed: u64,
}

impl<T: Scalar> ReplicateSampler<T> for MonteCarloSampler {
    fn propagate(
        &self,
        step: u64,
        pool: &[T],
        predictions: &[Probability<T>],
        table: &IncrementTable<T>,
        out: &mut [T],
    ) {
        let thresholds: Vec<f64> = predictions.iter().map(|p| p.value().as_f64()).collect();
        let key = derive_seed(self.seed, step);
        let stride = thresholds.len() as u64 + 1;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, slots)| {
            let mut rng = CounterRng::new(key, (chunk * CHUNK) as u64 * stride);
            for slot in slots.iter_mut() {
                let prev = pool[rng.index(pool.len())];
                let mut w = T::zero();
                for (i, &p) in thresholds.iter().enumerate() {
                    w = w + if rng.uniform() < p {
                        table.on_event[i]
                    } else {
                        table.on_non_event[i]
                    };
                }
                *slot = (prev + w).max(T::zero());
            }
        });
    }
}

/// Rank `k` (1-based) of the order statistic used as the limit:
/// `k = ceil((1 - alpha) M) = M - floor(alpha M)`, kept in `1..=M`.
pub fn limit_rank<T: Scalar>(alpha: T, m: usize) -> usize {
    // Guard against `alpha * M` landing a hair below an integer.
    let excess = (alpha.as_f64() * m as f64 * (1.0 + 1e-12)).floor() as usize;
    m.saturating_sub(excess).max(1)
}

/// The `(1 - alpha)` upper quantile of `values` under the order-statistic convention.
pub fn upper_quantile<T: Scalar>(values: &[T], alpha: T) -> T {
    let k = limit_rank(alpha, values.len());
    let from_top = values.len() - k + 1;
    if from_top <= TOP_SCAN_MAX {
        return kth_largest(values, from_top);
    }
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| {
        a.partial_cmp(b).expect("replicate statistics are finite")
    });
    *kth
}

/// Largest rank from the top still served by a single scan.
const TOP_SCAN_MAX: usize = 64;

/// `j`-th largest value by one pass with a small sorted buffer.
fn kth_largest<T: Scalar>(values: &[T], j: usize) -> T {
    // Ascending; top[0] is the smallest of the current top j.
    let mut top: Vec<T> = Vec::with_capacity(j + 1);
    for &v in values {
        if top.len() < j {
            let at = top.partition_point(|&x| x < v);
            top.insert(at, v);
        } else if v > top[0] {
            let at = top.partition_point(|&x| x < v);
            top.insert(at, v);
            top.remove(0);
        }
    }
    top[0]
}

/// The replicate statistics behind the current limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEnsemble<T> {
    statistics: Vec<T>,
    time_index: u64,
    limit: Option<T>,
}

/// `M` replicates at zero, before the first step.
pub fn init_ensemble<T: Scalar>(spec: &ChartSpec<T>) -> Result<ReplicateEnsemble<T>> {
    let m = spec.replicates();
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 replicates, got {m}")));
    }
    Ok(ReplicateEnsemble {
        statistics: vec![T::zero(); m],
        time_index: 0,
        limit: None,
    })
}

impl<T: Scalar> ReplicateEnsemble<T> {
    /// Rebuild from parts (snapshot restore).
    pub fn from_parts(statistics: Vec<T>, time_index: u64, limit: Option<T>) -> Result<Self> {
        if statistics.len() < 2 {
            return Err(Error::Config("ensemble needs at least 2 replicates".into()));
        }
        if statistics.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::Input("ensemble statistics must be finite and nonnegative".into()));
        }
        if (time_index == 0) != limit.is_none() {
            return Err(Error::Input("ensemble limit must be set exactly after the first step".into()));
        }
        Ok(Self {
            statistics,
            time_index,
            limit,
        })
    }

    pub fn statistics(&self) -> &[T] {
        &self.statistics
    }

    pub fn time_index(&self) -> u64 {
        self.time_index
    }

    /// `None` until the first step.
    pub fn limit(&self) -> Option<T> {
        self.limit
    }

    pub fn replicates(&self) -> usize {
        self.statistics.len()
    }

    /// Indices of replicates at or below the limit (all of them before the first step).
    pub fn survivors(&self) -> Vec<usize> {
        match self.limit {
            None => (0..self.statistics.len()).collect(),
            Some(limit) => self
                .statistics
                .iter()
                .enumerate()
                .filter(|(_, &s)| s <= limit)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Statistics of the survivors, in replicate order.
    pub fn survivor_pool(&self) -> Vec<T> {
        match self.limit {
            None => self.statistics.clone(),
            Some(limit) => self.statistics.iter().copied().filter(|&s| s <= limit).collect(),
        }
    }

    /// Fraction of replicates strictly above the limit.
    pub fn exceedance_fraction(&self) -> T {
        let Some(limit) = self.limit else {
            return T::zero();
        };
        let above = self.statistics.iter().filter(|&&s| s > limit).count();
        T::from_usize(above).expect("count fits") / T::from_usize(self.statistics.len()).expect("count fits")
    }

    /// Advance one step with the Monte Carlo sampler seeded from `spec`.
    pub fn advance(&self, predictions: &[Probability<T>], spec: &ChartSpec<T>) -> Result<Self> {
        self.advance_with(predictions, spec, &MonteCarloSampler { seed: spec.seed() })
    }

    /// Advance one step with an explicit replicate sampler.
    pub fn advance_with<S: ReplicateSampler<T>>(
        &self,
        predictions: &[Probability<T>],
        spec: &ChartSpec<T>,
        sampler: &S,
    ) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Input("cannot advance on an empty prediction vector".into()));
        }
        if spec.replicates() != self.statistics.len() {
            return Err(Error::Config(format!(
                "spec has {} replicates but ensemble has {}",
                spec.replicates(),
                self.statistics.len()
            )));
        }
        let step = self.time_index + 1;
        let table = IncrementTable::new(predictions, spec.alternative());
        let pool = self.survivor_pool();
        let mut statistics = vec![T::zero(); self.statistics.len()];
        sampler.propagate(step, &pool, predictions, &table, &mut statistics);

        let limit = upper_quantile(&statistics, spec.alpha());
        debug_assert!(
            statistics.iter().filter(|&&s| s > limit).count()
                <= statistics.len() - limit_rank(spec.alpha(), statistics.len())
        );
        Ok(Self {
            statistics,
            time_index: step,
            limit: Some(limit),
        })
    }
}

/// Free-function form of [`ReplicateEnsemble::advance`].
pub fn advance<T: Scalar>(
    ensemble: &ReplicateEnsemble<T>,
    predictions: &[Probability<T>],
    spec: &ChartSpec<T>,
) -> Result<ReplicateEnsemble<T>> {
    ensemble.advance(predictions, spec)
}

/// One limit per batch. Outcomes are ignored: limits depend only on the predictions.
pub fn limits_for_stream<T: Scalar>(batches: &[TimeBatch<T>], spec: &ChartSpec<T>) -> Result<Vec<T>> {
    if batches.is_empty() {
        return Err(Error::Input("limits need at least one batch".into()));
    }
    let mut ensemble = init_ensemble(spec)?;
    let mut limits = Vec::with_capacity(batches.len());
    for batch in batches {
        ensemble = ensemble.advance(batch.predictions(), spec)?;
        limits.push(ensemble.limit().expect("limit set after a step"));
    }
    Ok(limits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(v: &[f64]) -> Vec<Probability<f64>> {
        v.iter().map(|&x| Probability::new(x).unwrap()).collect()
    }

    fn spec(alpha: f64, m: usize) -> ChartSpec<f64> {
        ChartSpec::shift_up(2.0, alpha, m, 99).unwrap()
    }

    #[test]
    fn init_examples() {
        let e = init_ensemble(&spec(0.005, 5000)).unwrap();
        assert_eq!(e.statistics().len(), 5000);
        assert!(e.statistics().iter().all(|&s| s == 0.0));
        assert_eq!(e.limit(), None);
        assert_eq!(init_ensemble(&spec(0.005, 2)).unwrap().replicates(), 2);
        assert!(init_ensemble(&spec(0.005, 0)).is_err());
        assert!(init_ensemble(&spec(0.005, 1)).is_err());
    }

    #[test]
    fn rank_convention() {
        assert_eq!(limit_rank(0.005, 2000), 1990);
        assert_eq!(limit_rank(0.005, 5000), 4975);
        assert_eq!(limit_rank(0.3, 48), 34);
        assert_eq!(limit_rank(1e-5, 100_000), 99_999);
        assert_eq!(limit_rank(0.9999, 10), 1);
        assert_eq!(upper_quantile(&[3.0, 1.0, 2.0, 5.0, 4.0], 0.2), 4.0);
        assert_eq!(upper_quantile(&[3.0, 1.0, 2.0, 5.0, 4.0], 0.6), 2.0);
        assert_eq!(upper_quantile(&[0.0, 0.0, 1.0, 1.0], 0.25), 1.0);
    }

    #[test]
    fn scan_and_select_agree() {
        let mut r = crate::rng::CounterRng::new(5, 0);
        for m in [2usize, 7, 100, 1000, 5000] {
            let values: Vec<f64> = (0..m).map(|_| (r.uniform() * 20.0).floor()).collect();
            for j in 1..=m.min(TOP_SCAN_MAX) {
                let mut sorted = values.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(kth_largest(&values, j), sorted[m - j]);
            }
        }
    }

    #[test]
    fn two_point_increments() {
        let e = init_ensemble(&spec(0.005, 4000)).unwrap();
        let e = e.advance(&probs(&[0.5]), &spec(0.005, 4000)).unwrap();
        let up = (4.0f64 / 3.0).ln();
        let ups = e.statistics().iter().filter(|&&s| (s - up).abs() < 1e-12).count();
        let zeros = e.statistics().iter().filter(|&&s| s == 0.0).count();
        assert_eq!(ups + zeros, 4000);
        // Binomial(4000, 1/2): 6 sd is about 190.
        assert!((ups as i64 - 2000).abs() < 190, "{ups}");
        assert!((e.limit().unwrap() - up).abs() < 1e-12);
    }

    #[test]
    fn median_limit_sits_on_lower_atom() {
        let s = spec(0.5, 4001);
        let e = init_ensemble(&s).unwrap().advance(&probs(&[0.5]), &s).unwrap();
        // k = 2001 of 4001 two-point draws; the lower atom (0) wins unless the
        // upper atom holds more than half, which is about as likely as not,
        // so only assert the limit is one of the two atoms.
        let l = e.limit().unwrap();
        assert!(l == 0.0 || (l - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(e.exceedance_fraction() <= 0.5 + 1.0 / 4001.0);
    }

    #[test]
    fn near_zero_predictions_give_small_atom() {
        let s = spec(0.005, 2000);
        let e = init_ensemble(&s).unwrap().advance(&probs(&[0.0; 3]), &s).unwrap();
        // y = 0 every time: W = ln((1-g)/(1-p)) ~ -eps, floored at 0.
        assert!(e.statistics().iter().all(|&x| x >= 0.0 && x < 1e-9));
        assert!(e.limit().unwrap() < 1e-9);
    }

    #[test]
    fn advance_rejects_bad_input() {
        let s = spec(0.005, 100);
        let e = init_ensemble(&s).unwrap();
        assert!(e.advance(&[], &s).is_err());
        assert!(e.advance(&probs(&[0.5]), &spec(0.005, 50)).is_err());
        assert!(limits_for_stream::<f64>(&[], &s).is_err());
    }

    #[test]
    fn single_step_limit_is_quantile_of_positive_part() {
        let s = spec(0.1, 1000);
        let batch = TimeBatch::from_raw(1, &[0.2, 0.7, 0.4], &[true, true, true]).unwrap();
        let limits = limits_for_stream(&[batch.clone()], &s).unwrap();
        let e = init_ensemble(&s).unwrap().advance(batch.predictions(), &s).unwrap();
        assert_eq!(limits[0], upper_quantile(e.statistics(), 0.1));
        assert!(e.statistics().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn cfar_holds_each_step() {
        let s = ChartSpec::scale_up(2.0, 0.01, 1000, 5).unwrap();
        let mut e = init_ensemble(&s).unwrap();
        for t in 0..100 {
            let p = 0.05 + 0.9 * ((t * 37 % 100) as f64 / 100.0);
            e = e.advance(&probs(&[p, 1.0 - p]), &s).unwrap();
            assert!(e.exceedance_fraction() <= 0.01 + 1e-12);
            assert!(e.limit().unwrap() >= 0.0);
            assert_eq!(e.statistics().len(), 1000);
        }
    }

    #[test]
    fn deterministic_and_thread_count_independent() {
        let s = spec(0.01, 3000);
        let batches: Vec<_> = (1..=40)
            .map(|t| {
                let p = ((t * 7919) % 997) as f64 / 997.0;
                TimeBatch::from_raw(t, &[p, 1.0 - p, 0.5], &[false; 3]).unwrap()
            })
            .collect();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| limits_for_stream(&batches, &s).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let other = limits_for_stream(&batches, &s.clone().with_seed(100)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn f32_ensemble() {
        let s = ChartSpec::shift_up(2.0f32, 0.01, 500, 1).unwrap();
        let e = init_ensemble(&s).unwrap();
        let e = e.advance(&[Probability::new(0.3f32).unwrap()], &s).unwrap();
        assert!(e.limit().unwrap() >= 0.0);
    }

    #[test]
    fn from_parts_validation() {
        assert!(ReplicateEnsemble::from_parts(vec![0.0f64], 0, None).is_err());
        assert!(ReplicateEnsemble::from_parts(vec![0.0f64, -1.0], 1, Some(0.0)).is_err());
        assert!(ReplicateEnsemble::from_parts(vec![0.0f64, 0.0], 1, None).is_err());
        assert!(ReplicateEnsemble::from_parts(vec![0.0f64, 0.0], 0, None).is_ok());
    }
}
