//! Brute-force limit oracle for single-observation streams.
//!
//! The oracle enumerates every outcome path with exact rational weights and
//! takes the smallest statistic whose conditional CDF reaches `k / M`. The
//! engine side swaps the Monte Carlo sampler for one that emits each
//! `(pool value, outcome)` pair exactly `M * m_v / P * Pr(y)` times, which is
//! possible whenever those counts are integers.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};

use calibcusum::cusum::observation_increments;
use calibcusum::dpcl::{IncrementTable, ReplicateSampler};
use calibcusum::{init_ensemble, ChartSpec, LloParams, Probability};
use num_rational::Ratio;

pub type Q = Ratio<i128>;

/// A horizon of single-observation steps with exact prediction values.
#[derive(Debug, Clone)]
pub struct OracleCase {
    pub predictions: Vec<Q>,
    pub alternative: LloParams<f64>,
    pub alpha: Q,
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

impl OracleCase {
    pub fn spec(&self, m: usize) -> ChartSpec<f64> {
        ChartSpec::custom(self.alternative, to_f64(self.alpha), m, 0).unwrap()
    }

    fn prediction(&self, step: usize) -> Probability<f64> {
        Probability::new(to_f64(self.predictions[step])).unwrap()
    }
}

/// Exact limits for `M` replicates: rank `k = M - floor(alpha M)`.
pub fn oracle_limits(case: &OracleCase, m: usize) -> Vec<f64> {
    let m_q = Q::from_integer(m as i128);
    let k = m_q - (case.alpha * m_q).floor();
    let target = k / m_q;
    let mut paths: Vec<(f64, Q)> = vec![(0.0, Q::from_integer(1))];
    let mut limits = Vec::new();
    for (step, &p) in case.predictions.iter().enumerate() {
        let (on, off) = observation_increments(case.prediction(step).value(), &case.alternative);
        let one = Q::from_integer(1);
        let next: Vec<(f64, Q)> = paths
            .iter()
            .flat_map(|&(s, w)| [((s + on).max(0.0), w * p), ((s + off).max(0.0), w * (one - p))])
            .collect();
        let total: Q = next.iter().map(|x| x.1).sum();
        let mut by_value: BTreeMap<u64, Q> = BTreeMap::new();
        for &(s, w) in &next {
            // Nonnegative doubles order like their bit patterns.
            *by_value.entry(s.to_bits()).or_insert_with(|| Q::from_integer(0)) += w;
        }
        let mut cdf = Q::from_integer(0);
        let mut limit = None;
        for (bits, w) in by_value {
            cdf += w / total;
            if cdf >= target {
                limit = Some(f64::from_bits(bits));
                break;
            }
        }
        let limit = limit.expect("cdf reaches one");
        limits.push(limit);
        paths = next.into_iter().filter(|&(s, _)| s <= limit).collect();
    }
    limits
}

/// Emits exact outcome proportions; flags steps where they are not integral.
pub struct ExhaustiveSampler {
    pub predictions: Vec<Q>,
    pub failed: AtomicBool,
}

impl ExhaustiveSampler {
    pub fn new(case: &OracleCase) -> Self {
        Self {
            predictions: case.predictions.clone(),
            failed: AtomicBool::new(false),
        }
    }
}

impl ReplicateSampler<f64> for ExhaustiveSampler {
    fn propagate(
        &self,
        step: u64,
        pool: &[f64],
        _predictions: &[Probability<f64>],
        table: &IncrementTable<f64>,
        out: &mut [f64],
    ) {
        let p = self.predictions[step as usize - 1];
        let m = Q::from_integer(out.len() as i128);
        let size = Q::from_integer(pool.len() as i128);
        let mut counts: BTreeMap<u64, i128> = BTreeMap::new();
        for v in pool {
            *counts.entry(v.to_bits()).or_default() += 1;
        }
        let mut filled = 0;
        for (bits, m_v) in counts {
            let v = f64::from_bits(bits);
            for (prob, inc) in [
                (p, table.on_event[0]),
                (Q::from_integer(1) - p, table.on_non_event[0]),
            ] {
                let copies = m * Q::from_integer(m_v) / size * prob;
                if !copies.is_integer() {
                    self.failed.store(true, Ordering::Relaxed);
                    return;
                }
                for _ in 0..*copies.numer() {
                    out[filled] = (v + inc).max(0.0);
                    filled += 1;
                }
            }
        }
        assert_eq!(filled, out.len());
    }
}

/// Engine limits under the exhaustive sampler, or `None` when `M` cannot
/// represent the outcome distribution exactly.
pub fn engine_limits(case: &OracleCase, m: usize) -> Option<Vec<f64>> {
    let spec = case.spec(m);
    let sampler = ExhaustiveSampler::new(case);
    let mut ensemble = init_ensemble(&spec).unwrap();
    let mut limits = Vec::new();
    for step in 0..case.predictions.len() {
        ensemble = ensemble
            .advance_with(&[case.prediction(step)], &spec, &sampler)
            .unwrap();
        if sampler.failed.load(Ordering::Relaxed) {
            return None;
        }
        limits.push(ensemble.limit().unwrap());
    }
    Some(limits)
}

/// Smallest `M` in `2..=max_m` the exhaustive sampler can represent.
pub fn matched_replicates(case: &OracleCase, max_m: usize) -> Option<(usize, Vec<f64>)> {
    (2..=max_m).find_map(|m| engine_limits(case, m).map(|l| (m, l)))
}

pub fn q(n: i128, d: i128) -> Q {
    Q::new(n, d)
}
