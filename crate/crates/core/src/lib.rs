//! Calibration monitoring for streams of probability predictions and binary
//! outcomes.
//!
//! * [`probability`]: the linear-log-odds (LLO) adjustment and Bernoulli likelihoods.
//! * [`recalibration`]: maximum-likelihood LLO recalibration and the likelihood ratio test.
//! * [`cusum`]: the calibration CUSUM statistic.
//! * [`dpcl`]: Monte Carlo dynamic probability control limits.
//! * [`runlength`]: run-length simulation study harness.
//! * [`records`] and [`monitor`]: ingestion, streaming monitor, snapshots and trace export.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which the monitor and the simulation lab use.

pub mod cusum;
pub mod dpcl;
pub mod error;
pub mod monitor;
pub mod probability;
pub mod recalibration;
pub mod records;
pub mod rng;
pub mod runlength;
pub mod scalar;

pub use cusum::{increment, run_chart, step, ChartLabel, ChartSpec, ChartTrace, CusumValue, TraceRow};
pub use dpcl::{advance, init_ensemble, limits_for_stream, ReplicateEnsemble};
pub use error::{Error, Result};
pub use monitor::{run_monitor, Monitor, MonitorConfig, MonitorRow, MonitorSnapshot, SignalEvent, TraceFormat, TraceWriter};
pub use probability::{llo_adjust, loglik_calibrated, loglik_uncalibrated, LloParams, Probability, TimeBatch};
pub use records::{ingest, ingest_path, MonitorRecord, RecordFormat};
pub use recalibration::{apply_fit, calibration_test, fit_mle, CalibrationDataset, RecalibrationFit};
pub use scalar::Scalar;

pub type Probability64 = Probability<f64>;
pub type LloParams64 = LloParams<f64>;
pub type TimeBatch64 = TimeBatch<f64>;
pub type CalibrationDataset64 = CalibrationDataset<f64>;
pub type RecalibrationFit64 = RecalibrationFit<f64>;
pub type ChartSpec64 = ChartSpec<f64>;
pub type CusumValue64 = CusumValue<f64>;
pub type ReplicateEnsemble64 = ReplicateEnsemble<f64>;

pub type Probability32 = Probability<f32>;
pub type LloParams32 = LloParams<f32>;
pub type TimeBatch32 = TimeBatch<f32>;
pub type ChartSpec32 = ChartSpec<f32>;
pub type ReplicateEnsemble32 = ReplicateEnsemble<f32>;
