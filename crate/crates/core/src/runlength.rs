//! Zero-state run-length simulation for the calibration CUSUM chart.
//!
//! A cell pairs a chart with an outcome generator. Predictions are
//! uniform(0, 1); outcomes are Bernoulli at `g(p; truth)`, which is `p` itself
//! in the in-control case. Batch sizes are fixed or `1 + Poisson(lambda)`.
//!
//! In [`StreamMode::Shared`] one prediction stream and its limit sequence
//! serve every outcome replication of a cell. [`StreamMode::Fresh`] draws a
//! new stream and new limits for each replication.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cusum::{ChartLabel, ChartSpec};
use crate::dpcl::{init_ensemble, IncrementTable, ReplicateEnsemble};
use crate::error::{Error, Result};
use crate::probability::{llo_adjust, LloParams, Probability};
use crate::rng::{derive_seed, SimRng};

/// Default cap on the number of steps simulated per run.
pub const DEFAULT_HORIZON_CAP: u64 = 20_000;
/// Summary percentiles.
pub const PERCENTILES: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

const TAG_PREDICTIONS: u64 = 1;
const TAG_LIMITS: u64 = 2;
const TAG_OUTCOMES: u64 = 3;
const TAG_FRESH: u64 = 4;
const FIRST_CHUNK: usize = 256;

/// Number of trials per time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BatchSizeModel {
    Fixed { n: usize },
    /// `1 + Poisson(lambda)`.
    ShiftedPoisson { lambda: f64 },
}

impl BatchSizeModel {
    pub fn fixed(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("fixed batch size must be at least 1".into()));
        }
        Ok(Self::Fixed { n })
    }

    pub fn shifted_poisson(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Config(format!("poisson mean must be positive, got {lambda}")));
        }
        Ok(Self::ShiftedPoisson { lambda })
    }

    pub fn sample(&self, rng: &mut SimRng) -> usize {
        match *self {
            Self::Fixed { n } => n,
            Self::ShiftedPoisson { lambda } => 1 + rng.poisson(lambda) as usize,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Self::Fixed { n } => Self::fixed(n).map(|_| ()),
            Self::ShiftedPoisson { lambda } => Self::shifted_poisson(lambda).map(|_| ()),
        }
    }
}

impl fmt::Display for BatchSizeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed { n } => write!(f, "Fixed n={n}"),
            Self::ShiftedPoisson { lambda } => write!(f, "lPoisson lambda={lambda}"),
        }
    }
}

/// How predictions and outcomes are generated for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Outcomes are drawn from `g(p; truth)`; identity means in control.
    pub truth: LloParams<f64>,
    pub batch_model: BatchSizeModel,
    pub horizon_cap: u64,
}

impl GeneratorSpec {
    pub fn new(truth: LloParams<f64>, batch_model: BatchSizeModel) -> Self {
        Self {
            truth,
            batch_model,
            horizon_cap: DEFAULT_HORIZON_CAP,
        }
    }

    pub fn in_control(batch_model: BatchSizeModel) -> Self {
        Self::new(LloParams::identity(), batch_model)
    }

    pub fn with_horizon_cap(mut self, cap: u64) -> Self {
        self.horizon_cap = cap;
        self
    }

    pub fn is_in_control(&self) -> bool {
        self.truth.is_identity()
    }

    fn validate(&self) -> Result<()> {
        self.batch_model.validate()?;
        if self.horizon_cap == 0 {
            return Err(Error::Config("horizon cap must be positive".into()));
        }
        Ok(())
    }
}

/// Steps to the first signal, or truncation at the horizon cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunLength {
    Signaled(u64),
    Truncated,
}

impl RunLength {
    pub fn steps(self) -> Option<u64> {
        match self {
            Self::Signaled(t) => Some(t),
            Self::Truncated => None,
        }
    }
}

/// One simulated time point: predictions, outcome probabilities under the
/// truth, the chart's increment table and the dynamic limit.
#[derive(Debug, Clone)]
struct StreamStep {
    outcome_probs: Vec<f64>,
    table: IncrementTable<f64>,
    limit: f64,
}

/// A prediction stream with its limits, extended on demand.
struct LimitedStream {
    steps: Vec<StreamStep>,
    ensemble: ReplicateEnsemble<f64>,
    prediction_rng: SimRng,
    spec: ChartSpec<f64>,
    gen: GeneratorSpec,
}

impl LimitedStream {
    fn new(spec: &ChartSpec<f64>, gen: &GeneratorSpec, seed: u64) -> Result<Self> {
        let spec = spec.clone().with_seed(derive_seed(seed, TAG_LIMITS));
        Ok(Self {
            steps: Vec::new(),
            ensemble: init_ensemble(&spec)?,
            prediction_rng: SimRng::new(derive_seed(seed, TAG_PREDICTIONS), 0),
            spec,
            gen: gen.clone(),
        })
    }

    fn len(&self) -> usize {
        self.steps.len()
    }

    fn extend_to(&mut self, len: usize) -> Result<()> {
        while self.steps.len() < len {
            let n = self.gen.batch_model.sample(&mut self.prediction_rng);
            let predictions: Vec<Probability<f64>> = (0..n)
                .map(|_| Probability::new(self.prediction_rng.uniform()))
                .collect::<Result<_>>()?;
            self.ensemble = self.ensemble.advance(&predictions, &self.spec)?;
            let outcome_probs = predictions
                .iter()
                .map(|&p| llo_adjust(p, &self.gen.truth).value())
                .collect();
            self.steps.push(StreamStep {
                outcome_probs,
                table: IncrementTable::new(&predictions, self.spec.alternative()),
                limit: self.ensemble.limit().expect("limit after advance"),
            });
        }
        Ok(())
    }
}

/// Observed chart for one outcome replication.
#[derive(Debug, Clone)]
struct Replication {
    rng: SimRng,
    s: f64,
    t: usize,
    result: Option<RunLength>,
}

impl Replication {
    fn new(seed: u64, index: u64) -> Self {
        Self {
            rng: SimRng::new(derive_seed(seed, TAG_OUTCOMES), index),
            s: 0.0,
            t: 0,
            result: None,
        }
    }

    /// Run until a signal or the end of the available stream.
    fn advance(&mut self, steps: &[StreamStep], cap: u64) {
        while self.result.is_none() && self.t < steps.len() {
            let step = &steps[self.t];
            self.t += 1;
            let mut w = 0.0;
            for (i, &q) in step.outcome_probs.iter().enumerate() {
                w += if self.rng.bernoulli(q) {
                    step.table.on_event[i]
                } else {
                    step.table.on_non_event[i]
                };
            }
            self.s = (self.s + w).max(0.0);
            if self.s > step.limit {
                self.result = Some(RunLength::Signaled(self.t as u64));
            } else if self.t as u64 >= cap {
                self.result = Some(RunLength::Truncated);
            }
        }
    }
}

/// Simulate one zero-state run on its own stream and limits.
pub fn simulate_run(gen: &GeneratorSpec, spec: &ChartSpec<f64>, seed: u64) -> Result<RunLength> {
    gen.validate()?;
    let mut stream = LimitedStream::new(spec, gen, seed)?;
    let mut rep = Replication::new(seed, 0);
    while rep.result.is_none() {
        stream.extend_to(stream.len() + 1)?;
        rep.advance(&stream.steps, gen.horizon_cap);
    }
    Ok(rep.result.expect("loop exits with a result"))
}

/// Outcome replications on one shared stream.
fn shared_stream_runs(
    gen: &GeneratorSpec,
    spec: &ChartSpec<f64>,
    replications: usize,
    seed: u64,
) -> Result<Vec<RunLength>> {
    let mut stream = LimitedStream::new(spec, gen, seed)?;
    let mut reps: Vec<Replication> = (0..replications as u64)
        .map(|r| Replication::new(seed, r))
        .collect();
    let cap = gen.horizon_cap as usize;
    let mut target = FIRST_CHUNK.min(cap);
    loop {
        stream.extend_to(target)?;
        let steps = &stream.steps;
        reps.par_iter_mut()
            .for_each(|rep| rep.advance(steps, gen.horizon_cap));
        if reps.iter().all(|r| r.result.is_some()) {
            break;
        }
        target = (target * 2).min(cap);
    }
    Ok(reps.into_iter().map(|r| r.result.expect("finished")).collect())
}

/// Whether each replication reuses one stream or gets its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    #[default]
    Shared,
    Fresh,
}

/// Run lengths for one cell.
pub fn simulate_cell(
    gen: &GeneratorSpec,
    spec: &ChartSpec<f64>,
    replications: usize,
    seed: u64,
    mode: StreamMode,
) -> Result<Vec<RunLength>> {
    gen.validate()?;
    match mode {
        StreamMode::Shared => shared_stream_runs(gen, spec, replications, seed),
        StreamMode::Fresh => (0..replications as u64)
            .into_par_iter()
            .map(|r| simulate_run(gen, spec, derive_seed(derive_seed(seed, TAG_FRESH), r)))
            .collect(),
    }
}

/// ARL, SDRL and run-length percentiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLengthSummary {
    pub arl: f64,
    pub sdrl: f64,
    /// Values at [`PERCENTILES`], in order.
    pub quantiles: [f64; 5],
    pub replications: usize,
    pub truncated: usize,
}

impl RunLengthSummary {
    pub fn quantile(&self, percentile: u32) -> Option<f64> {
        PERCENTILES
            .iter()
            .position(|&p| (p * 100.0).round() as u32 == percentile)
            .map(|i| self.quantiles[i])
    }
}

/// Linear interpolation between order statistics (`h = (n - 1) q`).
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarize completed runs; truncated runs are counted, never imputed.
pub fn summarize(runs: &[RunLength]) -> Result<RunLengthSummary> {
    let mut values: Vec<f64> = runs.iter().filter_map(|r| r.steps()).map(|t| t as f64).collect();
    let truncated = runs.len() - values.len();
    if values.is_empty() {
        return Err(Error::AllTruncated { truncated });
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len() as f64;
    let arl = values.iter().sum::<f64>() / n;
    let sdrl = if values.len() > 1 {
        (values.iter().map(|v| (v - arl).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(RunLengthSummary {
        arl,
        sdrl,
        quantiles: PERCENTILES.map(|q| empirical_quantile(&values, q)),
        replications: runs.len(),
        truncated,
    })
}

/// Reference run-length row for a chart that false alarms with probability
/// `alpha` at every step: mean `1/alpha`, standard deviation
/// `sqrt(1 - alpha)/alpha`, and quantiles of the number of in-control steps
/// before the alarm (the failure-count geometric law).
pub fn geometric_reference(alpha: f64) -> RunLengthSummary {
    let ln_q = (1.0 - alpha).ln();
    let quantile = |p: f64| {
        let x = (1.0 - p).ln() / ln_q - 1.0;
        // Absorb rounding just above an integer.
        (x - 1e-9).ceil().max(0.0)
    };
    RunLengthSummary {
        arl: 1.0 / alpha,
        sdrl: (1.0 - alpha).sqrt() / alpha,
        quantiles: PERCENTILES.map(quantile),
        replications: 0,
        truncated: 0,
    }
}

/// A chart paired with a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub chart: ChartSpec<f64>,
    pub generator: GeneratorSpec,
}

impl StudyCell {
    /// First table column: the chart alternative for in-control cells, the
    /// generating parameters otherwise.
    pub fn parameters_label(&self) -> String {
        if self.generator.is_in_control() {
            let a = self.chart.alternative();
            format!("delta_a={},gamma_a={}", fmt_param(a.delta()), fmt_param(a.gamma()))
        } else {
            let t = &self.generator.truth;
            format!("delta={},gamma={}", fmt_param(t.delta()), fmt_param(t.gamma()))
        }
    }
}

fn fmt_param(v: f64) -> String {
    if v < 1.0 && (1.0 / v).fract() == 0.0 {
        format!("1/{}", 1.0 / v)
    } else {
        format!("{v}")
    }
}

/// Replication settings for a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: StreamMode,
}

/// One summarized cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: StudyCell,
    pub summary: RunLengthSummary,
}

/// Simulate and summarize every cell. Cell `i` uses seed `derive_seed(config.seed, i)`.
pub fn run_study(cells: &[StudyCell], config: &StudyConfig) -> Result<Vec<CellResult>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let runs = simulate_cell(
                &cell.generator,
                &cell.chart,
                config.replications,
                derive_seed(config.seed, i as u64),
                config.mode,
            )?;
            Ok(CellResult {
                cell: cell.clone(),
                summary: summarize(&runs)?,
            })
        })
        .collect()
}

/// The four batch-size settings of the study grid.
pub fn standard_batch_models() -> [BatchSizeModel; 4] {
    [
        BatchSizeModel::Fixed { n: 1 },
        BatchSizeModel::Fixed { n: 3 },
        BatchSizeModel::ShiftedPoisson { lambda: 1.0 },
        BatchSizeModel::ShiftedPoisson { lambda: 3.0 },
    ]
}

/// In-control grid: shift-up (delta_a = 2) and scale-up (gamma_a = 2) charts
/// for every batch-size setting.
pub fn in_control_grid(alpha: f64, replicates: usize) -> Result<Vec<StudyCell>> {
    let mut cells = Vec::new();
    for batch_model in standard_batch_models() {
        for chart in [
            ChartSpec::shift_up(2.0, alpha, replicates, 0)?,
            ChartSpec::scale_up(2.0, alpha, replicates, 0)?,
        ] {
            cells.push(StudyCell {
                chart,
                generator: GeneratorSpec::in_control(batch_model),
            });
        }
    }
    Ok(cells)
}

/// Chart whose alternative equals the generating miscalibration.
pub fn matched_chart(truth: &LloParams<f64>, alpha: f64, replicates: usize) -> Result<ChartSpec<f64>> {
    let label = match (truth.delta(), truth.gamma()) {
        (d, g) if g == 1.0 && d > 1.0 => ChartLabel::ShiftUp,
        (d, g) if g == 1.0 && d < 1.0 => ChartLabel::ShiftDown,
        (d, g) if d == 1.0 && g > 1.0 => ChartLabel::ScaleUp,
        (d, g) if d == 1.0 && g < 1.0 => ChartLabel::ScaleDown,
        _ => ChartLabel::Custom,
    };
    ChartSpec::new(label, *truth, alpha, replicates, 0)
}

/// Out-of-control grid: truths `(2,1), (1,2), (1/2,1), (1,1/2)` with matched
/// charts for every batch-size setting.
pub fn out_of_control_grid(alpha: f64, replicates: usize) -> Result<Vec<StudyCell>> {
    let truths = [(2.0, 1.0), (1.0, 2.0), (0.5, 1.0), (1.0, 0.5)];
    let mut cells = Vec::new();
    for (d, g) in truths {
        let truth = LloParams::new(d, g)?;
        for batch_model in standard_batch_models() {
            cells.push(StudyCell {
                chart: matched_chart(&truth, alpha, replicates)?,
                generator: GeneratorSpec::new(truth, batch_model),
            });
        }
    }
    Ok(cells)
}

/// Write results in the study table layout. When any cell is in control a
/// geometric reference row for that cell's `alpha` closes the table.
pub fn write_table_csv<W: Write>(results: &[CellResult], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let first = if results.iter().all(|r| r.cell.generator.is_in_control()) {
        "Alternatives"
    } else {
        "Parameters"
    };
    out.write_record([
        first, "Distribution", "ARL", "SDRL", "10th", "25th", "50th", "75th", "90th", "Truncated",
    ])?;
    let row = |label: String, dist: String, s: &RunLengthSummary| {
        let mut r = vec![label, dist, format!("{:.2}", s.arl), format!("{:.2}", s.sdrl)];
        r.extend(s.quantiles.iter().map(|q| format!("{q:.2}")));
        r.push(s.truncated.to_string());
        r
    };
    for res in results {
        out.write_record(row(
            res.cell.parameters_label(),
            res.cell.generator.batch_model.to_string(),
            &res.summary,
        ))?;
    }
    if let Some(ic) = results.iter().find(|r| r.cell.generator.is_in_control()) {
        let alpha = ic.cell.chart.alpha();
        out.write_record(row(
            String::new(),
            format!("Geometric(probability={alpha})"),
            &geometric_reference(alpha),
        ))?;
    }
    out.flush()?;
    Ok(())
}
