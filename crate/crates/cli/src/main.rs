// NaN must fail the positivity checks, hence the negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod report;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use tbqudit::drift::{track_run, EpochOffsets, OffsetEstimate, Realigner};
use tbqudit::formats;
use tbqudit::harness::{self, ExperimentConfig, Summary};
use tbqudit::metrics::{display_rotate, optimize_phase, MeritReport};
use tbqudit::mzi::{CalibrationSet, Detector};
use tbqudit::qudit::{DensityOperator, Subsystem};
use tbqudit::sim::{standard_settings, Calibrations, Simulator};
use tbqudit::tomography::{mle_reconstruct, MleOptions};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tbqudit",
    version,
    about = "Time-bin qudit entanglement: simulation, tracking, tomography and scoring"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run: coincidence counts, singles histograms and optionally time tags.
    Simulate(SimulateArgs),
    /// Estimate the per-epoch time offset from one detector's histograms.
    Track(TrackArgs),
    /// Tabulate time-tagged coincidences into counts after removing offsets.
    Realign(RealignArgs),
    /// Maximum-likelihood reconstruction from a counts table.
    Reconstruct(ReconstructArgs),
    /// Figures of merit of a density operator, as JSON.
    Metrics(MetricsArgs),
    /// Bar-chart rendering and merit table of a density operator.
    Report(ReportArgs),
    /// End-to-end experiment: every trial through every stage, then a summary.
    Run(RunArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration JSON. Takes precedence over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "paper-100km")]
    preset: String,
    /// Multiplies coincidence volumes [default: 0.01 for presets].
    #[arg(long)]
    scale: Option<f64>,
    /// Base seed [default: 42 for presets].
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of trials.
    #[arg(long)]
    trials: Option<usize>,
}

impl ExperimentArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => formats::read_json::<ExperimentConfig>(path)?,
            None => ExperimentConfig::preset(&self.preset, self.scale.unwrap_or(0.01), self.seed.unwrap_or(42))?,
        };
        if let Some(s) = self.scale {
            cfg.plan.count_scale = s;
        }
        if let Some(s) = self.seed {
            cfg.plan.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write every time-tagged coincidence to events.csv.
    #[arg(long)]
    events: bool,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    histograms: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    detector: u8,
    #[arg(long, default_value_t = 1.0)]
    slot_interval_ns: f64,
    #[arg(long, default_value_t = 0.33)]
    window_ns: f64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RealignArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    offsets_a: PathBuf,
    #[arg(long)]
    offsets_b: PathBuf,
    /// Experiment configuration whose settings the events refer to (the standard 16 when absent).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    slot_interval_ns: f64,
    #[arg(long, default_value_t = 0.33)]
    window_ns: f64,
    /// Output counts CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    counts: PathBuf,
    /// Calibration JSON, or one of the presets alice, bob, balanced.
    #[arg(long, default_value = "alice")]
    calib_a: String,
    #[arg(long, default_value = "bob")]
    calib_b: String,
    #[arg(long)]
    out: PathBuf,
    /// Run report JSON [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Start from the projected linear-inversion estimate.
    #[arg(long)]
    warm_start: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Given {
    Signal,
    Idler,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    rho: PathBuf,
    /// Target phase in radians, or "auto" to optimize it.
    #[arg(long, default_value = "auto")]
    phi: String,
    /// Subsystem conditioned on for the coherent information.
    #[arg(long, value_enum, default_value = "idler")]
    given: Given,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    rho: PathBuf,
    /// Output file; .html gives SVG charts, anything else plain text.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "auto")]
    phi: String,
    /// summary.json from `run`; the table then shows mean ± std over trials.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Artifact directory; only the summary is printed when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallel_trials: bool,
}

enum CliError {
    Usage(String),
    Data(tbqudit::Error),
}

impl From<tbqudit::Error> for CliError {
    fn from(e: tbqudit::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Successful commands report whether every fit converged.
enum Done {
    Ok,
    NotConverged,
}

fn parse_phi(s: &str) -> CliResult<Option<f64>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| CliError::Usage(format!("--phi expects a number or auto, got {s:?}")))
}

fn load_calibration(s: &str) -> CliResult<CalibrationSet> {
    let c = match s {
        "alice" => CalibrationSet::alice(),
        "bob" => CalibrationSet::bob(),
        "balanced" => CalibrationSet::balanced(),
        path => formats::read_json(path)?,
    };
    c.validate()?;
    Ok(c)
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(formats::create(p)?),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(args: SimulateArgs) -> CliResult<Done> {
    let cfg = args.experiment.load()?;
    let rho = cfg.true_state.build()?;
    let sim = Simulator::new(&rho, &cfg.plan, &cfg.source, &cfg.channel, &cfg.calibrations())?;
    fs::create_dir_all(&args.out)?;
    formats::write_json(args.out.join("config.json"), &cfg)?;
    formats::write_records(formats::create(args.out.join("counts.csv"))?, &sim.simulate_counts())?;
    for series in sim.histograms() {
        let name = formats::histogram_file_name(series.receiver, series.detector);
        formats::write_histograms(formats::create(args.out.join(name))?, &series.traces)?;
    }
    if args.events {
        let mut w = formats::EventWriter::new(formats::create(args.out.join("events.csv"))?)?;
        let epochs = cfg.plan.epochs();
        let mut start = 0;
        while start < epochs {
            let end = (start + 16).min(epochs);
            let batch: Vec<_> = (start..end).into_par_iter().map(|e| sim.epoch_events(e)).collect();
            for events in &batch {
                w.write(events)?;
            }
            start = end;
        }
        w.finish()?;
    }
    log::info!("simulation written to {}", args.out.display());
    Ok(Done::Ok)
}

fn track(args: TrackArgs) -> CliResult<Done> {
    let detector = Detector::from_index(args.detector)?;
    let traces = formats::read_histograms(formats::open(&args.histograms)?)?;
    let report = track_run(&traces, detector, args.slot_interval_ns * 1e-9, args.window_ns * 1e-9)?;
    for (epoch, why) in &report.failed {
        log::warn!("epoch {epoch} not tracked: {why}");
    }
    if report.estimates.is_empty() {
        return Err(tbqudit::Error::InsufficientData("no epoch could be tracked".into()).into());
    }
    formats::write_offsets(output(args.out.as_deref())?, &report.estimates)?;
    Ok(Done::Ok)
}

/// Offset of the tracked epoch nearest to `epoch`.
fn nearest(estimates: &[OffsetEstimate], epoch: u32) -> f64 {
    estimates
        .iter()
        .min_by_key(|e| (e.epoch_min as i64 - epoch as i64).abs())
        .map(|e| e.tau_s)
        .expect("checked non-empty")
}

fn realign(args: RealignArgs) -> CliResult<Done> {
    let settings = match &args.config {
        Some(path) => formats::read_json::<ExperimentConfig>(path)?.plan.settings,
        None => standard_settings(),
    };
    let est_a = formats::read_offsets(formats::open(&args.offsets_a)?)?;
    let est_b = formats::read_offsets(formats::open(&args.offsets_b)?)?;
    if est_a.is_empty() || est_b.is_empty() {
        return Err(tbqudit::Error::InsufficientData("offsets file has no estimates".into()).into());
    }
    let mut realigner = Realigner::new(&settings, args.slot_interval_ns * 1e-9, args.window_ns * 1e-9)?;
    formats::for_each_epoch(formats::open(&args.events)?, |events| {
        let epoch = events[0].epoch;
        let (mut a, mut b) = (EpochOffsets::default(), EpochOffsets::default());
        a.insert(epoch, nearest(&est_a, epoch));
        b.insert(epoch, nearest(&est_b, epoch));
        realigner.push(events, &a, &b)
    })?;
    let out = realigner.finish();
    log::info!("accepted {} coincidences, discarded {}", out.accepted, out.discarded);
    formats::write_records(output(args.out.as_deref())?, &out.records)?;
    Ok(Done::Ok)
}

#[derive(Serialize)]
struct RunReport<'a> {
    iterations: usize,
    log_likelihood: f64,
    converged: bool,
    rate_scale: f64,
    total_counts: f64,
    warnings: &'a [String],
}

fn reconstruct(args: ReconstructArgs) -> CliResult<Done> {
    if args.max_iter == 0 || !(args.tol > 0.0) {
        return Err(CliError::Usage("--max-iter and --tol must be positive".into()));
    }
    let calibs = Calibrations {
        alice: load_calibration(&args.calib_a)?,
        bob: load_calibration(&args.calib_b)?,
    };
    let problem = harness::ingest_counts(&args.counts, &calibs)?;
    let options = MleOptions {
        max_iter: args.max_iter,
        tol: args.tol,
        warm_start: args.warm_start,
        ..MleOptions::default()
    };
    let res = mle_reconstruct(&problem, &options)?;
    formats::write_json(&args.out, &res.rho)?;
    let report_path = args.report.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        p.into()
    });
    formats::write_json(
        report_path,
        &RunReport {
            iterations: res.iterations,
            log_likelihood: res.log_likelihood,
            converged: res.converged,
            rate_scale: res.rate_scale,
            total_counts: problem.total_counts(),
            warnings: &res.warnings,
        },
    )?;
    if res.converged {
        Ok(Done::Ok)
    } else {
        log::error!(
            "reconstruction stopped after {} iterations without converging",
            res.iterations
        );
        Ok(Done::NotConverged)
    }
}

fn metrics(args: MetricsArgs) -> CliResult<Done> {
    let phi = parse_phi(&args.phi)?;
    let rho: DensityOperator = formats::read_json(&args.rho)?;
    let given = match args.given {
        Given::Signal => Subsystem::Signal,
        Given::Idler => Subsystem::Idler,
    };
    let merit = MeritReport::compute_given(&rho, phi, given)?;
    let mut w = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &merit)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(Done::Ok)
}

fn report(args: ReportArgs) -> CliResult<Done> {
    let rho: DensityOperator = formats::read_json(&args.rho)?;
    let phi = match parse_phi(&args.phi)? {
        Some(p) => p,
        None => optimize_phase(&rho)?.0,
    };
    let merit = MeritReport::compute(&rho, Some(phi))?;
    let summary: Option<Summary> = args.summary.as_ref().map(formats::read_json).transpose()?;
    let rows = report::merit_rows(&merit, summary.as_ref().map(|s| &s.metrics));
    let shown = display_rotate(&rho, phi)?;
    let html = args
        .out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("html") || e.eq_ignore_ascii_case("htm"));
    let text = if html {
        report::html(&shown, phi, &rows)
    } else {
        report::text(&shown, phi, &rows)
    };
    fs::write(&args.out, text)?;
    Ok(Done::Ok)
}

fn run(args: RunArgs) -> CliResult<Done> {
    let cfg = args.experiment.load()?;
    let outcome = harness::run_experiment(&cfg, args.parallel_trials)?;
    if let Some(dir) = &args.out {
        harness::write_artifacts(&outcome, dir)?;
    }
    let summary = &outcome.summary;
    let mut out = io::stdout().lock();
    out.write_all(harness::summary_json(summary)?.as_bytes())?;
    out.flush()?;
    if summary.trials_succeeded == 0 {
        let why = summary.failures.first().map(|f| f.1.clone()).unwrap_or_default();
        return Err(tbqudit::Error::InsufficientData(format!("every trial failed: {why}")).into());
    }
    if summary.trials.iter().any(|t| !t.converged) {
        log::error!("at least one reconstruction did not converge");
        return Ok(Done::NotConverged);
    }
    Ok(Done::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Track(a) => track(a),
        Command::Realign(a) => realign(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Metrics(a) => metrics(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::NotConverged) => ExitCode::from(EXIT_NOT_CONVERGED),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
