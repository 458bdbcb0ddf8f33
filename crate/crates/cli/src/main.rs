//! `prema`: simulate solenoid-valve transients, extract features, train and
//! evaluate the fault and RUL models, and run the monitoring loop.
//!
//! Exit codes: 0 success, 1 runtime/IO/format error, 2 usage error
//! (including a dataset or model of the wrong kind).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use prema_core::acquisition::{buffer_fill_duration, max_cycles, Clock};
use prema_core::features::{extract_all, write_features_csv, ExtractionConfig};
use prema_core::models::{
    argmax, evaluate, gen_fault_dataset, gen_rul_dataset, train_fault, train_rul, Dataset,
    DatasetKind, FaultDatasetConfig, FaultLabel, ModelError, ModelTrainConfig, RulDatasetConfig,
};
use prema_core::pipeline::{
    build_scenario, check_models, run_monitor, timing_report_json, CostModel, MonitorConfig,
    PipelineError, Scenario, ScenarioConfig,
};
use prema_core::tinynn::{restore, save, Mlp, ModelKind, TrainHistory};
use prema_core::waveform::{
    synth_actuation_train, synth_transient, ActuationSchedule, AdcConfig, DegradationState,
    FaultCondition, SynthOptions, TransientTrace, ValveParams,
};
use thiserror::Error;

/// Cycle count that maps `--severity 1` onto a fully worn valve.
const SEVERITY_CYCLES: u64 = 1500;

/// Bank sizes and actuation frequencies of the published timing table.
const TIMING_TABLE: [(usize, f64); 11] = [
    (1000, 2.0),
    (1000, 1.0),
    (2000, 2.0),
    (2000, 1.0),
    (2000, 0.5),
    (5000, 2.0),
    (5000, 1.0),
    (5000, 0.5),
    (10_000, 2.0),
    (10_000, 1.0),
    (10_000, 0.5),
];

/// A request the user can fix by changing arguments or inputs.
#[derive(Debug, Error)]
#[error("{0}")]
struct UsageError(String);

#[derive(Parser)]
#[command(
    name = "prema",
    version,
    about = "Predictive maintenance for solenoid valves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a drive-current trace and write it as CSV.
    Simulate(SimulateArgs),
    /// Detect actuations in a trace and write one feature row per actuation.
    Extract(ExtractArgs),
    /// Generate a labelled synthetic dataset.
    GenDataset(GenDatasetArgs),
    /// Train a fault or RUL model and write it with its loss history.
    Train(TrainArgs),
    /// Evaluate a model on a dataset and print the report as JSON.
    Eval(EvalArgs),
    /// Run a model on feature vectors.
    Infer(InferArgs),
    /// Run the acquisition and inference loop; prints JSON lines.
    Monitor(MonitorArgs),
    /// Print buffer fill durations and cycle capacities.
    Timing(TimingArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FaultArg {
    Good,
    SpoolStuck,
    SpringFailure,
    UnderVoltage,
}

impl FaultArg {
    fn condition(self, voltage: f64) -> FaultCondition {
        match self {
            FaultArg::Good => FaultCondition::Good,
            FaultArg::SpoolStuck => FaultCondition::SpoolStuck,
            FaultArg::SpringFailure => FaultCondition::SpringFailure,
            FaultArg::UnderVoltage => FaultCondition::UnderVoltage {
                applied_voltage: voltage,
            },
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Fault,
    Rul,
}

impl Task {
    fn kind(self) -> DatasetKind {
        match self {
            Task::Fault => DatasetKind::Fault,
            Task::Rul => DatasetKind::Rul,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Realtime,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    /// Deterministic work units.
    Steps,
    /// Measured wall time.
    Wall,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a non-negative number")),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("`{s}` is not in [0, 1]")),
    }
}

fn class_counts(s: &str) -> Result<[usize; 4], String> {
    let parsed: Result<Vec<usize>, _> = s.split(',').map(|v| v.trim().parse::<usize>()).collect();
    match parsed.ok().and_then(|v| <[usize; 4]>::try_from(v).ok()) {
        Some(c) if c.iter().sum::<usize>() > 0 => Ok(c),
        _ => Err(format!(
            "`{s}` is not four comma-separated counts with a positive total"
        )),
    }
}

fn supply_voltage(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (8.0..24.0).contains(&v) => Ok(v),
        _ => Err(format!("`{s}` is not a supply voltage in [8, 24)")),
    }
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "good")]
    fault: FaultArg,
    /// Supply voltage for `under_voltage`, V.
    #[arg(long, default_value = "12", value_parser = supply_voltage)]
    voltage: f64,
    /// Number of actuations.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    cycles: u64,
    /// Wear, from 0 (new) to 1 (at failure).
    #[arg(long, default_value = "0", value_parser = unit_interval)]
    severity: f64,
    /// Analog noise standard deviation, mA.
    #[arg(long, default_value = "0", value_parser = non_negative)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Actuation frequency for multi-actuation traces, Hz.
    #[arg(long, default_value = "1", value_parser = positive)]
    fop: f64,
    /// Sample rate, Hz.
    #[arg(long, default_value = "1000", value_parser = positive)]
    fs: f64,
    /// Fluid pressure, bar.
    #[arg(long, default_value = "1", value_parser = non_negative)]
    pressure: f64,
    /// Coil temperature, °C.
    #[arg(long, default_value = "26")]
    temperature: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ExtractArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include every intermediate feature column.
    #[arg(long)]
    full: bool,
}

#[derive(clap::Args)]
struct GenDatasetArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rows per class: good, spool_stuck, spring_failure, under_voltage.
    #[arg(long, default_value = "600,200,200,400", value_parser = class_counts)]
    counts: [usize; 4],
    /// Distinct simulated valves.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    valves: Option<u64>,
    #[arg(long, value_parser = non_negative)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 1500, value_parser = clap::value_parser!(u64).range(1..))]
    failure_cycle: u64,
    /// Cycles between captured actuations along a trajectory.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    sample_every: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value = "0.001", value_parser = positive)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature CSV as written by `extract`; one JSON line per row.
    #[arg(long, conflicts_with_all = ["di_dt", "auc"])]
    features: Option<PathBuf>,
    #[arg(long, requires = "auc", required_unless_present = "features")]
    di_dt: Option<f64>,
    #[arg(long, requires = "di_dt")]
    auc: Option<f64>,
}

#[derive(clap::Args)]
struct MonitorArgs {
    #[arg(long)]
    fault_model: PathBuf,
    #[arg(long)]
    rul_model: PathBuf,
    /// Samples per bank.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value = "1000", value_parser = positive)]
    fs: f64,
    #[arg(long, default_value = "1", value_parser = positive)]
    fop: f64,
    /// `degradation`, a fault name for a steady stream, or a trace CSV path.
    #[arg(long, default_value = "degradation")]
    scenario: String,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: ClockArg,
    /// How the virtual clock charges for processing.
    #[arg(long, value_enum, default_value = "steps")]
    cost: CostArg,
    /// Realtime pacing factor.
    #[arg(long, default_value = "1", value_parser = positive)]
    speedup: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0.5", value_parser = non_negative)]
    noise: f64,
    /// Actuations in a steady scenario.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    actuations: u64,
    #[arg(long, default_value_t = 1500, value_parser = clap::value_parser!(u64).range(1..))]
    failure_cycle: u64,
    /// Valve cycles between monitored actuations in the degradation scenario.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    stride: u64,
    /// Supply voltage for the `under_voltage` scenario, V.
    #[arg(long, default_value = "12", value_parser = supply_voltage)]
    voltage: f64,
    /// Alarm when predicted RUL falls below this many cycles.
    #[arg(long, default_value = "100", value_parser = positive)]
    rul_threshold: f64,
    /// Alarm when any fault class reaches this probability.
    #[arg(long, default_value = "0.5", value_parser = unit_interval)]
    fault_threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TimingArgs {
    /// Samples per bank; with `--fop`, prints one row instead of the table.
    #[arg(long, requires = "fop", value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    #[arg(long, requires = "k", value_parser = positive)]
    fop: Option<f64>,
    #[arg(long, default_value = "1000", value_parser = positive)]
    fs: f64,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write + Send>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn input(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("cannot open {}", path.display())
    })?))
}

fn load_model(path: &Path) -> Result<Mlp> {
    restore(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(input(path)?)
        .with_context(|| format!("cannot read dataset {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let params = ValveParams {
        pressure: a.pressure,
        temperature: a.temperature,
        ..ValveParams::default()
    };
    let fault = a.fault.condition(a.voltage);
    let wear = (a.severity * SEVERITY_CYCLES as f64).round() as u64;
    let deg = DegradationState::new(wear, SEVERITY_CYCLES)?;
    let opts = SynthOptions {
        noise_std: a.noise,
        seed: a.seed,
        adc: AdcConfig {
            sample_rate: a.fs,
            ..AdcConfig::default()
        },
        ..SynthOptions::default()
    };
    let trace = if a.cycles == 1 {
        synth_transient(&params, fault, deg, &opts)?
    } else {
        let cycles = vec![(fault, deg); a.cycles as usize];
        let schedule = ActuationSchedule {
            f_op: a.fop,
            ..ActuationSchedule::default()
        };
        synth_actuation_train(&params, &cycles, &schedule, &opts)?.trace
    };
    let mut out = output(a.out.as_deref())?;
    trace.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let trace = TransientTrace::read_csv(input(&a.input)?)
        .with_context(|| format!("cannot read trace {}", a.input.display()))?;
    let extraction = extract_all(
        &trace,
        &ExtractionConfig::for_sample_rate(trace.sample_rate),
    );
    for d in &extraction.diagnostics {
        eprintln!(
            "note: actuation at sample {} skipped: {}",
            d.zero_index, d.error
        );
    }
    let mut out = output(a.out.as_deref())?;
    write_features_csv(&mut out, &extraction.features, a.full)?;
    out.flush()?;
    Ok(())
}

fn gen_dataset(a: GenDatasetArgs) -> Result<()> {
    let ds = match a.task {
        Task::Fault => {
            let mut cfg = FaultDatasetConfig {
                counts: a.counts,
                ..FaultDatasetConfig::default()
            };
            if let Some(v) = a.valves {
                cfg.valves = v as usize;
            }
            if let Some(n) = a.noise {
                cfg.noise_std = n;
            }
            gen_fault_dataset(&cfg, a.seed)?
        }
        Task::Rul => {
            let mut cfg = RulDatasetConfig {
                failure_cycle: a.failure_cycle,
                sample_every: a.sample_every,
                ..RulDatasetConfig::default()
            };
            if let Some(v) = a.valves {
                cfg.valves = v as usize;
            }
            if let Some(n) = a.noise {
                cfg.noise_std = n;
            }
            gen_rul_dataset(&cfg, a.seed)?
        }
    };
    let mut out = output(a.out.as_deref())?;
    ds.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    out.with_file_name(name)
}

fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    let mut w = output(Some(path))?;
    writeln!(w, "epoch,train_loss,val_loss")?;
    for (i, (t, v)) in h.train_loss.iter().zip(&h.val_loss).enumerate() {
        writeln!(w, "{},{t},{v}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = ModelTrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        learning_rate: a.lr,
        seed: a.seed,
        ..ModelTrainConfig::default()
    };
    let (model, history, report) = match a.task {
        Task::Fault => train_fault(&ds, &cfg),
        Task::Rul => train_rul(&ds, &cfg),
    }?;
    save(&model, &a.out).with_context(|| format!("cannot write model {}", a.out.display()))?;
    write_history(&a.history.unwrap_or_else(|| history_path(&a.out)), &history)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn model_task(model: &Mlp) -> Task {
    match model.kind {
        ModelKind::Classifier => Task::Fault,
        ModelKind::Regressor => Task::Rul,
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let found = ds.kind()?;
    let expected = model_task(&model).kind();
    if found != expected {
        return Err(ModelError::KindMismatch { expected, found }.into());
    }
    println!("{}", serde_json::to_string(&evaluate(&model, &ds)?)?);
    Ok(())
}

fn prediction_json(model: &Mlp, x: [f64; 2]) -> Result<serde_json::Value> {
    let y = model.infer(&x)?;
    Ok(match model.kind {
        ModelKind::Classifier => {
            let class = FaultLabel::from_index(argmax(&y)).map(FaultLabel::name);
            serde_json::json!({ "di_dt": x[0], "auc": x[1], "probs": y, "class": class })
        }
        ModelKind::Regressor => serde_json::json!({ "di_dt": x[0], "auc": x[1], "rul": y[0] }),
    })
}

/// `(di_dt, auc)` from every row of a feature CSV, located by header name.
fn read_feature_rows(path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut rdr = csv::Reader::from_reader(input(path)?);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| UsageError(format!("{} has no `{name}` column", path.display())))
    };
    let (di, auc) = (column("di_dt")?, column("auc")?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| {
            rec[i].trim().parse::<f64>().with_context(|| {
                format!("{} line {line}: bad number `{}`", path.display(), &rec[i])
            })
        };
        rows.push([num(di)?, num(auc)?]);
    }
    Ok(rows)
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if model.input_dim() != 2 {
        return Err(UsageError(format!(
            "model takes {} inputs, features have 2",
            model.input_dim()
        ))
        .into());
    }
    let rows = match (&a.features, a.di_dt, a.auc) {
        (Some(path), _, _) => read_feature_rows(path)?,
        (None, Some(d), Some(auc)) => vec![[d, auc]],
        _ => unreachable!("clap requires --features or both --di-dt and --auc"),
    };
    let mut out = output(None)?;
    for x in rows {
        writeln!(out, "{}", prediction_json(&model, x)?)?;
    }
    out.flush()?;
    Ok(())
}

fn scenario_codes(a: &MonitorArgs) -> Result<Vec<u16>> {
    let scenario = match a.scenario.as_str() {
        "degradation" => Scenario::Degradation {
            failure_cycle: a.failure_cycle,
            stride: a.stride,
        },
        name => match FaultArg::from_str(name, false) {
            Ok(f) => Scenario::Steady(f.condition(a.voltage)),
            Err(_) => {
                let path = Path::new(name);
                if !path.exists() {
                    return Err(UsageError(format!(
                        "scenario `{name}` is neither a generator (degradation, good, spool_stuck, \
                         spring_failure, under_voltage) nor an existing trace file"
                    ))
                    .into());
                }
                let trace = TransientTrace::read_csv(input(path)?)
                    .with_context(|| format!("cannot read trace {}", path.display()))?;
                if (trace.sample_rate - a.fs).abs() > 1e-9 * a.fs {
                    return Err(UsageError(format!(
                        "trace is sampled at {} Hz but --fs is {}",
                        trace.sample_rate, a.fs
                    ))
                    .into());
                }
                return Ok(trace.to_codes(&AdcConfig {
                    sample_rate: a.fs,
                    ..AdcConfig::default()
                }));
            }
        },
    };
    let stream = build_scenario(&ScenarioConfig {
        scenario,
        actuations: a.actuations as usize,
        f_op: a.fop,
        fs: a.fs,
        noise_std: a.noise,
        seed: a.seed,
    })?;
    Ok(stream.codes)
}

fn monitor(a: MonitorArgs) -> Result<()> {
    let fault = load_model(&a.fault_model)?;
    let rul = load_model(&a.rul_model)?;
    check_models(&fault, &rul)?;
    let cfg = MonitorConfig {
        rul_alarm_threshold: a.rul_threshold,
        fault_alarm_threshold: a.fault_threshold,
        clock: match a.clock {
            ClockArg::Virtual => Clock::Virtual,
            ClockArg::Realtime => Clock::Realtime,
        },
        cost_model: match a.cost {
            CostArg::Steps => CostModel::Steps,
            CostArg::Wall => CostModel::WallTime,
        },
        speedup: a.speedup,
        ..MonitorConfig::new(a.k as usize, a.fs, a.fop)
    };
    let codes = scenario_codes(&a)?;
    let mut out = output(a.out.as_deref())?;
    let mut write_err: Option<io::Error> = None;
    let result = run_monitor(codes, &fault, &rul, &cfg, |record| {
        if write_err.is_none() {
            if let Err(e) = writeln!(out, "{}", record.to_json()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("cannot write monitor output");
    }
    writeln!(out, "{}", timing_report_json(&result.report))?;
    out.flush()?;
    Ok(())
}

fn timing(a: TimingArgs) -> Result<()> {
    let rows: Vec<(usize, f64)> = match (a.k, a.fop) {
        (Some(k), Some(f)) => vec![(k as usize, f)],
        _ => TIMING_TABLE.to_vec(),
    };
    let mut out = output(None)?;
    writeln!(out, "k,fs,f_op,b_fd_s,c_max")?;
    for (k, f_op) in rows {
        let b_fd = buffer_fill_duration(k, a.fs)?;
        let c_max = max_cycles(k, f_op, a.fs)?;
        writeln!(out, "{k},{},{f_op},{b_fd},{c_max}", a.fs)?;
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Extract(a) => extract(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Monitor(a) => monitor(a),
        Command::Timing(a) => timing(a),
    }
}

/// Usage problems exit with 2; everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<ModelError>(),
                Some(ModelError::KindMismatch { .. })
            )
            || matches!(
                e.downcast_ref::<PipelineError>(),
                Some(PipelineError::Model(_))
            )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
