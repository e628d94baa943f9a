mod config;

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use calibcusum::records::{self, write_jsonl, MonitorRecord};
use calibcusum::runlength::{in_control_grid, out_of_control_grid, run_study, write_table_csv, StreamMode, StudyConfig};
use calibcusum::{
    apply_fit, calibration_test, fit_mle, init_ensemble, CalibrationDataset, Monitor, MonitorConfig,
    MonitorSnapshot, RecordFormat, TimeBatch, TraceFormat, TraceWriter,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{build_charts, ChartSettings, FileConfig, DEFAULT_ALPHA, DEFAULT_REPLICATES};

const EXIT_SIGNAL: u8 = 2;

/// Calibration monitoring for probability predictions with binary outcomes.
#[derive(Parser)]
#[command(name = "calibcusum", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the LLO recalibration by maximum likelihood.
    Recalibrate(RecalibrateArgs),
    /// Likelihood ratio test of calibration.
    Test(TestArgs),
    /// Run the CUSUM charts over a record stream.
    Monitor(MonitorArgs),
    /// Print the dynamic control limits for a record stream.
    Dpcl(DpclArgs),
    /// Run-length simulation study.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Record file (`-` for stdin).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Record format; inferred from the extension when omitted.
    #[arg(long, value_parser = parse_record_format)]
    format: Option<RecordFormat>,
}

#[derive(Args)]
struct ChartArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Monte Carlo replicates per chart.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RecalibrateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Write recalibrated records here as JSONL.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Significance level for the reported decision.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
}

#[derive(Args)]
struct MonitorArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    charts: ChartArgs,
    /// Trace output (stdout when omitted).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_parser = parse_trace_format)]
    trace_format: Option<TraceFormat>,
    /// Append to an existing trace file instead of replacing it.
    #[arg(long)]
    append_trace: bool,
    #[arg(long)]
    snapshot_in: Option<PathBuf>,
    #[arg(long)]
    snapshot_out: Option<PathBuf>,
    /// Also write the snapshot after every N processed batches.
    #[arg(long)]
    snapshot_every: Option<u64>,
    /// Stop each chart at its first signal.
    #[arg(long)]
    halt_on_signal: bool,
}

#[derive(Args)]
struct DpclArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    charts: ChartArgs,
    /// Limits output (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// In-control grid.
    InControl,
    /// Out-of-control grid.
    OutOfControl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Shared,
    Fresh,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "in-control")]
    preset: Preset,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    /// Outcome replications per cell.
    #[arg(long, default_value_t = 1000)]
    replications: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Whether replications share one prediction stream per cell.
    #[arg(long, value_enum, default_value = "shared")]
    mode: Mode,
    /// Table output (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_record_format(s: &str) -> Result<RecordFormat, String> {
    s.parse().map_err(|e: calibcusum::Error| e.to_string())
}

fn parse_trace_format(s: &str) -> Result<TraceFormat, String> {
    s.parse().map_err(|e: calibcusum::Error| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::from(EXIT_SIGNAL),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns whether a signal was emitted.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Recalibrate(a) => recalibrate(a).map(|()| false),
        Command::Test(a) => test(a).map(|()| false),
        Command::Monitor(a) => monitor(a),
        Command::Dpcl(a) => dpcl(a).map(|()| false),
        Command::Simulate(a) => simulate(a).map(|()| false),
    }
}

fn open_input(path: &Path) -> Result<Box<dyn Read>> {
    if path == Path::new("-") {
        Ok(Box::new(io::stdin()))
    } else {
        Ok(Box::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
    }
}

fn resolve_input(args: &InputArgs, file: &FileConfig) -> Result<(PathBuf, RecordFormat)> {
    let Some(path) = args.input.clone().or_else(|| file.input.clone()) else {
        bail!("no input given (use --input or set `input` in the config)");
    };
    let format = args.format.or(file.format).unwrap_or_else(|| RecordFormat::from_path(&path));
    Ok((path, format))
}

fn read_batches(args: &InputArgs, file: &FileConfig) -> Result<Vec<TimeBatch<f64>>> {
    let (path, format) = resolve_input(args, file)?;
    records::ingest(open_input(&path)?, format).with_context(|| format!("reading {}", path.display()))
}

fn open_output(path: Option<&Path>, append: bool) -> Result<Box<dyn Write>> {
    Ok(match path {
        None => Box::new(BufWriter::new(io::stdout().lock())),
        Some(p) => {
            let file = if append {
                OpenOptions::new().create(true).append(true).open(p)
            } else {
                File::create(p)
            }
            .with_context(|| format!("opening {}", p.display()))?;
            Box::new(BufWriter::new(file))
        }
    })
}

fn dataset(batches: &[TimeBatch<f64>]) -> Result<CalibrationDataset<f64>> {
    let predictions = batches.iter().flat_map(|b| b.predictions().iter().copied()).collect();
    let outcomes = batches.iter().flat_map(|b| b.outcomes().iter().copied()).collect();
    Ok(CalibrationDataset::new(predictions, outcomes)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    n: usize,
    delta: f64,
    gamma: f64,
    loglik: f64,
    loglik_identity: f64,
    iterations: usize,
}

fn recalibrate(a: RecalibrateArgs) -> Result<()> {
    let batches = read_batches(&a.input, &FileConfig::default())?;
    let data = dataset(&batches)?;
    let fit = fit_mle(&data)?;
    if let Some(path) = &a.output {
        let mut out = open_output(Some(path), false)?;
        let mut recs = Vec::with_capacity(data.len());
        for b in &batches {
            let adjusted = apply_fit(b.predictions(), &fit)?;
            recs.extend(adjusted.iter().zip(b.outcomes()).map(|(p, &y)| MonitorRecord {
                t: b.time_index(),
                p: p.value(),
                y,
                tags: Default::default(),
            }));
        }
        write_jsonl(&mut out, &recs)?;
        out.flush()?;
    }
    print_json(&FitReport {
        n: data.len(),
        delta: fit.params_hat.delta(),
        gamma: fit.params_hat.gamma(),
        loglik: fit.loglik_at_mle,
        loglik_identity: fit.loglik_at_identity,
        iterations: fit.iterations,
    })
}

#[derive(Serialize)]
struct TestReport {
    n: usize,
    delta: f64,
    gamma: f64,
    statistic: f64,
    df: u32,
    p_value: f64,
    level: f64,
    reject: bool,
}

fn test(a: TestArgs) -> Result<()> {
    if !(a.level > 0.0 && a.level < 1.0) {
        bail!("--level must lie in (0, 1)");
    }
    let data = dataset(&read_batches(&a.input, &FileConfig::default())?)?;
    let fit = calibration_test(&data)?;
    print_json(&TestReport {
        n: data.len(),
        delta: fit.params_hat.delta(),
        gamma: fit.params_hat.gamma(),
        statistic: fit.lrt_statistic,
        df: calibcusum::recalibration::LRT_DEGREES_OF_FREEDOM,
        p_value: fit.p_value,
        level: a.level,
        reject: fit.p_value < a.level,
    })
}

fn chart_settings(a: &ChartArgs, file: &FileConfig) -> ChartSettings {
    ChartSettings {
        alpha: a.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA),
        replicates: a.replicates.or(file.replicates).unwrap_or(DEFAULT_REPLICATES),
        seed: a.seed.or(file.seed).unwrap_or(0),
    }
}

fn monitor(a: MonitorArgs) -> Result<bool> {
    let file = FileConfig::load(a.charts.config.as_deref())?;
    let settings = chart_settings(&a.charts, &file);
    let charts = build_charts(&file, &settings)?;
    let halt = a.halt_on_signal || file.halt_on_signal.unwrap_or(false);
    let config = MonitorConfig::new(charts, halt)?;

    let snapshot_in = a.snapshot_in.clone().or_else(|| file.snapshot_in.clone());
    let snapshot_out = a.snapshot_out.clone().or_else(|| file.snapshot_out.clone());
    let mut monitor = match &snapshot_in {
        Some(path) => {
            let snap = MonitorSnapshot::read(path).with_context(|| format!("reading snapshot {}", path.display()))?;
            Monitor::resume(config, snap).context("refusing to resume")?
        }
        None => Monitor::new(config)?,
    };

    let trace_path = a.trace.clone().or_else(|| file.trace.clone());
    let trace_format = a.trace_format.or(file.trace_format).unwrap_or_else(|| match &trace_path {
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => TraceFormat::Jsonl,
        _ => TraceFormat::Csv,
    });
    let header = !(a.append_trace && trace_path.as_ref().is_some_and(|p| p.exists()));
    let mut trace = TraceWriter::new(open_output(trace_path.as_deref(), a.append_trace)?, trace_format, header)?;

    let (path, format) = resolve_input(&a.input, &file)?;
    let mut signaled = false;
    let mut processed = 0u64;
    for batch in records::batches(open_input(&path)?, format)? {
        let batch = batch.with_context(|| format!("reading {}", path.display()))?;
        let out = monitor.process(&batch)?;
        if out.skipped {
            continue;
        }
        trace.write_rows(&out.rows)?;
        for s in &out.signals {
            signaled = true;
            eprintln!("signal: chart={} t={} S={} limit={}", s.chart_label, s.time_index, s.s, s.limit);
        }
        processed += 1;
        if let (Some(every), Some(p)) = (a.snapshot_every, &snapshot_out) {
            if every > 0 && processed % every == 0 {
                trace.flush()?;
                monitor.snapshot().write_atomic(p)?;
            }
        }
        if monitor.all_halted() {
            break;
        }
    }
    trace.flush()?;
    if let Some(p) = &snapshot_out {
        monitor.snapshot().write_atomic(p).with_context(|| format!("writing snapshot {}", p.display()))?;
    }
    Ok(signaled)
}

fn dpcl(a: DpclArgs) -> Result<()> {
    let file = FileConfig::load(a.charts.config.as_deref())?;
    let charts = build_charts(&file, &chart_settings(&a.charts, &file))?;
    let batches = read_batches(&a.input, &file)?;
    let mut out = open_output(a.output.as_deref(), false)?;
    writeln!(out, "chart_label,t,n_t,limit")?;
    let mut ensembles = charts.iter().map(init_ensemble).collect::<calibcusum::Result<Vec<_>>>()?;
    for batch in &batches {
        for (ensemble, spec) in ensembles.iter_mut().zip(&charts) {
            *ensemble = ensemble.advance(batch.predictions(), spec)?;
            let limit = ensemble.limit().expect("limit set after a step");
            writeln!(out, "{},{},{},{}", spec.label(), batch.time_index(), batch.len(), limit)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cells = match a.preset {
        Preset::InControl => in_control_grid(a.alpha, a.replicates)?,
        Preset::OutOfControl => out_of_control_grid(a.alpha, a.replicates)?,
    };
    let config = StudyConfig {
        replications: a.replications,
        seed: a.seed,
        mode: match a.mode {
            Mode::Shared => StreamMode::Shared,
            Mode::Fresh => StreamMode::Fresh,
        },
    };
    let results = run_study(&cells, &config)?;
    let mut out = open_output(a.output.as_deref(), false)?;
    write_table_csv(&results, &mut out)?;
    out.flush()?;
    Ok(())
}
