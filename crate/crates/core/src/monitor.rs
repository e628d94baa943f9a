//! Streaming monitor: several charts over one batch stream, with snapshots.
//!
//! For every batch and every chart, in configuration order: advance the
//! replicate ensemble, take its limit, step the CUSUM and compare. Charts
//! never share state, so a k-chart run is the union of k single-chart runs.
//!
//! The replicate generator is keyed by `(seed, step)`, so a snapshot needs
//! only the step count to restore the generator position.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cusum::{step, ChartLabel, ChartSpec, CusumValue, TraceRow};
use crate::dpcl::{init_ensemble, ReplicateEnsemble};
use crate::error::{Error, Result};
use crate::probability::TimeBatch;

const SNAPSHOT_VERSION: u32 = 1;

/// Charts plus the post-signal policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub charts: Vec<ChartSpec<f64>>,
    /// Stop a chart at its first signal instead of flagging later rows.
    #[serde(default)]
    pub halt_on_signal: bool,
}

impl MonitorConfig {
    pub fn new(charts: Vec<ChartSpec<f64>>, halt_on_signal: bool) -> Result<Self> {
        let config = Self { charts, halt_on_signal };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.charts.is_empty() {
            return Err(Error::Config("monitor needs at least one chart".into()));
        }
        let mut seen = BTreeSet::new();
        for chart in &self.charts {
            if !seen.insert(chart.label()) {
                return Err(Error::Config(format!("chart label '{}' used twice", chart.label())));
            }
            if chart.replicates() < 2 {
                return Err(Error::Config(format!("chart '{}' needs at least 2 replicates", chart.label())));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            version: u32,
            config: &'a MonitorConfig,
        }
        let bytes = serde_json::to_vec(&Canonical {
            version: SNAPSHOT_VERSION,
            config: self,
        })
        .expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One emitted trace row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub chart_label: ChartLabel,
    #[serde(flatten)]
    pub row: TraceRow<f64>,
}

/// First crossing of a chart's limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalEvent {
    pub chart_label: ChartLabel,
    pub time_index: u64,
    pub s: f64,
    pub limit: f64,
}

/// Everything one batch produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub rows: Vec<MonitorRow>,
    pub signals: Vec<SignalEvent>,
    /// The batch was at or before the resume point and was not processed.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartState {
    pub label: ChartLabel,
    pub cusum: CusumValue<f64>,
    pub ensemble: ReplicateEnsemble<f64>,
    /// Steps taken; the replicate generator position.
    pub rng_step: u64,
    pub signal_time: Option<u64>,
    pub halted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSnapshot {
    pub version: u32,
    pub config_hash: String,
    /// Time index of the last processed batch (0 before any).
    pub last_t: u64,
    pub charts: Vec<ChartState>,
}

impl MonitorSnapshot {
    pub fn read(path: &Path) -> Result<Self> {
        let snapshot: Self = serde_json::from_slice(&fs::read(path)?)?;
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(Error::Config(format!("unsupported snapshot version {}", snapshot.version)));
        }
        Ok(snapshot)
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".tmp");
        let tmp = path.with_file_name(name);
        {
            let mut file = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut file, self)?;
            file.write_all(b"\n")?;
            file.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Monitor {
    config: MonitorConfig,
    hash: String,
    charts: Vec<ChartState>,
    last_t: u64,
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Result<Self> {
        config.validate()?;
        let charts = config
            .charts
            .iter()
            .map(|spec| {
                Ok(ChartState {
                    label: spec.label(),
                    cusum: CusumValue::initial(),
                    ensemble: init_ensemble(spec)?,
                    rng_step: 0,
                    signal_time: None,
                    halted: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = config.hash();
        Ok(Self {
            config,
            hash,
            charts,
            last_t: 0,
        })
    }

    /// Continue from a snapshot taken under the same configuration.
    pub fn resume(config: MonitorConfig, snapshot: MonitorSnapshot) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        if snapshot.config_hash != hash {
            return Err(Error::SnapshotMismatch {
                snapshot: snapshot.config_hash,
                config: hash,
            });
        }
        if snapshot.charts.len() != config.charts.len() {
            return Err(Error::Config("snapshot chart count differs from configuration".into()));
        }
        for (state, spec) in snapshot.charts.iter().zip(&config.charts) {
            let restored = ReplicateEnsemble::from_parts(
                state.ensemble.statistics().to_vec(),
                state.ensemble.time_index(),
                state.ensemble.limit(),
            )?;
            if state.label != spec.label()
                || restored.replicates() != spec.replicates()
                || restored.time_index() != state.rng_step
                || state.cusum.time_index > snapshot.last_t
            {
                return Err(Error::Config(format!("snapshot state for chart '{}' is inconsistent", state.label)));
            }
        }
        Ok(Self {
            config,
            hash,
            charts: snapshot.charts,
            last_t: snapshot.last_t,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn last_t(&self) -> u64 {
        self.last_t
    }

    pub fn charts(&self) -> &[ChartState] {
        &self.charts
    }

    /// True once every chart has halted (only with `halt_on_signal`).
    pub fn all_halted(&self) -> bool {
        self.charts.iter().all(|c| c.halted)
    }

    pub fn any_signal(&self) -> bool {
        self.charts.iter().any(|c| c.signal_time.is_some())
    }

    pub fn snapshot(&self) -> MonitorSnapshot {
        MonitorSnapshot {
            version: SNAPSHOT_VERSION,
            config_hash: self.hash.clone(),
            last_t: self.last_t,
            charts: self.charts.clone(),
        }
    }

    /// Process one batch. Batches at or before the last processed time index
    /// are skipped, which lets a resumed run replay its input from the start.
    pub fn process(&mut self, batch: &TimeBatch<f64>) -> Result<StepOutput> {
        if batch.time_index() <= self.last_t {
            return Ok(StepOutput {
                skipped: true,
                ..StepOutput::default()
            });
        }
        let mut out = StepOutput::default();
        let mut next = self.charts.clone();
        for (state, spec) in next.iter_mut().zip(&self.config.charts) {
            if state.halted {
                continue;
            }
            let ensemble = state.ensemble.advance(batch.predictions(), spec)?;
            let limit = ensemble.limit().expect("limit set after a step");
            let cusum = step(&state.cusum, batch, spec)?;
            let signaled = cusum.s > limit;
            out.rows.push(MonitorRow {
                chart_label: state.label,
                row: TraceRow {
                    time_index: cusum.time_index,
                    n_t: batch.len(),
                    w: cusum.w,
                    s: cusum.s,
                    limit,
                    signaled,
                    post_signal: state.signal_time.is_some(),
                },
            });
            if signaled && state.signal_time.is_none() {
                state.signal_time = Some(cusum.time_index);
                out.signals.push(SignalEvent {
                    chart_label: state.label,
                    time_index: cusum.time_index,
                    s: cusum.s,
                    limit,
                });
                state.halted = self.config.halt_on_signal;
            }
            state.rng_step = ensemble.time_index();
            state.ensemble = ensemble;
            state.cusum = cusum;
        }
        self.charts = next;
        self.last_t = batch.time_index();
        Ok(out)
    }
}

/// Trace output encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Jsonl,
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "jsonl" | "json" => Ok(Self::Jsonl),
            other => Err(Error::Config(format!("unknown trace format '{other}'"))),
        }
    }
}

pub const TRACE_CSV_HEADER: &str = "chart_label,t,n_t,W,S,limit,signaled";

/// Writes trace rows as CSV (`chart_label,t,n_t,W,S,limit,signaled`) or JSONL.
pub struct TraceWriter<W: Write> {
    out: W,
    format: TraceFormat,
}

impl<W: Write> TraceWriter<W> {
    /// Set `header` to false when appending to an existing CSV trace.
    pub fn new(mut out: W, format: TraceFormat, header: bool) -> Result<Self> {
        if header && format == TraceFormat::Csv {
            writeln!(out, "{TRACE_CSV_HEADER}")?;
        }
        Ok(Self { out, format })
    }

    pub fn write_row(&mut self, row: &MonitorRow) -> Result<()> {
        match self.format {
            TraceFormat::Csv => {
                let r = &row.row;
                writeln!(
                    self.out,
                    "{},{},{},{},{},{},{}",
                    row.chart_label,
                    r.time_index,
                    r.n_t,
                    r.w,
                    r.s,
                    r.limit,
                    u8::from(r.signaled)
                )?;
            }
            TraceFormat::Jsonl => {
                serde_json::to_writer(&mut self.out, row)?;
                self.out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn write_rows(&mut self, rows: &[MonitorRow]) -> Result<()> {
        rows.iter().try_for_each(|r| self.write_row(r))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Run a whole batch sequence through a fresh monitor.
pub fn run_monitor(config: MonitorConfig, batches: &[TimeBatch<f64>]) -> Result<(Vec<MonitorRow>, Vec<SignalEvent>)> {
    let mut monitor = Monitor::new(config)?;
    let mut rows = Vec::new();
    let mut signals = Vec::new();
    for batch in batches {
        let out = monitor.process(batch)?;
        rows.extend(out.rows);
        signals.extend(out.signals);
        if monitor.all_halted() {
            break;
        }
    }
    Ok((rows, signals))
}
