//! The streaming monitor: raw ADC codes flow through the ping-pong buffer,
//! each delivered bank is scanned for actuations, and every actuation is
//! classified and given a remaining-life estimate.
//!
//! An actuation can straddle two banks. The consumer keeps the last
//! `lower_window + frame` samples of each analysis window and prepends
//! them to the next bank; edges are de-duplicated by global sample index.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    run_acquisition, AcquisitionConfig, AcquisitionError, Clock, Measurements, TimingReport,
};
use crate::features::{extract_features, scan_edges, EdgeStatus, ExtractionConfig, FeatureError};
use crate::models::{argmax, FaultLabel, Predictor};
use crate::tinynn::{Mlp, ModelKind, NnError};
use crate::waveform::{
    synth_actuation_train, ActuationSchedule, AdcConfig, DegradationState, FaultCondition,
    SynthOptions, ValveParams, WaveformError,
};

/// Virtual-clock duration of one processing step (one sample touched or
/// one multiply-accumulate).
pub const VIRTUAL_STEP_SECONDS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
}

/// How the virtual clock charges for consumer work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// Deterministic step counts; identical runs give identical reports.
    #[default]
    Steps,
    /// Measured wall time of the consumer.
    WallTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorConfig {
    pub k: usize,
    pub fs: f64,
    pub f_op: f64,
    /// Alarm when predicted RUL drops below this many cycles.
    pub rul_alarm_threshold: f64,
    /// Alarm when any fault class reaches this probability.
    pub fault_alarm_threshold: f64,
    pub clock: Clock,
    pub cost_model: CostModel,
    /// Realtime pacing factor.
    pub speedup: f64,
    pub adc: AdcConfig,
    pub extraction: ExtractionConfig,
}

impl MonitorConfig {
    pub fn new(k: usize, fs: f64, f_op: f64) -> Self {
        Self {
            k,
            fs,
            f_op,
            rul_alarm_threshold: 100.0,
            fault_alarm_threshold: 0.5,
            clock: Clock::Virtual,
            cost_model: CostModel::Steps,
            speedup: 1.0,
            adc: AdcConfig {
                sample_rate: fs,
                ..AdcConfig::default()
            },
            extraction: ExtractionConfig::for_sample_rate(fs),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 || !(self.fs > 0.0) || !(self.f_op > 0.0) {
            return Err(PipelineError::Parameter(
                "k, fs and f_op must be positive".into(),
            ));
        }
        if !(self.rul_alarm_threshold > 0.0) || !(self.fault_alarm_threshold > 0.0) {
            return Err(PipelineError::Parameter(
                "alarm thresholds must be positive".into(),
            ));
        }
        self.adc.validate()?;
        self.extraction
            .validate()
            .map_err(|e| PipelineError::Parameter(e.to_string()))
    }

    fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            k: self.k,
            fs: self.fs,
            f_op: Some(self.f_op),
            clock: self.clock,
            speedup: self.speedup,
        }
    }
}

/// `true` when a fault class is likely enough or remaining life is short.
pub fn alarm_predicate(fault_probs: &[f64; 4], rul: f64, cfg: &MonitorConfig) -> bool {
    let worst_fault = fault_probs[1..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    worst_fault >= cfg.fault_alarm_threshold || rul < cfg.rul_alarm_threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub buffer_seq: u64,
    /// Global sample index of the actuation start.
    pub zero_index: u64,
    pub fault_probs: [f64; 4],
    pub predicted_class: FaultLabel,
    pub rul: f64,
    pub alarm: bool,
    /// Inference time for this actuation, seconds.
    pub it_pc: f64,
    /// Seconds since the start of the stream (virtual or wall).
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub buffer_seq: u64,
    pub zero_index: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorRecord {
    Event(MonitorEvent),
    Diagnostic(Diagnostic),
}

fn us(seconds: f64) -> f64 {
    seconds * 1e6
}

impl MonitorRecord {
    /// One JSON object; times in microseconds.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            MonitorRecord::Event(e) => serde_json::json!({
                "type": "event",
                "buffer_seq": e.buffer_seq,
                "zero_index": e.zero_index,
                "fault_probs": e.fault_probs,
                "predicted_class": e.predicted_class,
                "rul": e.rul,
                "alarm": e.alarm,
                "it_pc": us(e.it_pc),
                "timestamp": us(e.timestamp),
            }),
            MonitorRecord::Diagnostic(d) => serde_json::json!({
                "type": "diagnostic",
                "buffer_seq": d.buffer_seq,
                "zero_index": d.zero_index,
                "message": d.message,
            }),
        }
    }
}

/// The closing `timing_report` JSON object; times in microseconds.
pub fn timing_report_json(r: &TimingReport) -> serde_json::Value {
    serde_json::json!({
        "type": "timing_report",
        "clock": r.clock,
        "k": r.k,
        "fs": r.fs,
        "f_op": r.f_op,
        "b_fd": us(r.buffer_fill_duration),
        "c_max": r.max_cycles,
        "it_pc": r.inference_time_per_cycle.map(us),
        "it_pb": r.inference_time_per_buffer.map(us),
        "it_pb_max": r.max_inference_time_per_buffer.map(us),
        "it_pb_below_b_fd": r.keeps_up(),
        "banks": r.banks_delivered,
        "samples_in": r.samples_in,
        "samples_delivered": r.samples_delivered,
        "overrun_count": r.overrun_count,
        "lossless": r.lossless,
    })
}

/// Build a report from measurements; requires at least one processed bank.
pub fn timing_report(cfg: &MonitorConfig, m: &Measurements) -> Result<TimingReport, PipelineError> {
    if m.per_buffer.is_empty() {
        return Err(PipelineError::Parameter(
            "no processed buffers to report".into(),
        ));
    }
    Ok(TimingReport::from_measurements(&cfg.acquisition(), m)?)
}

/// A model usable by the monitor, with a deterministic work estimate.
pub trait MonitorModel: Predictor + Sync {
    /// Processing steps per inference, charged on the virtual clock.
    fn steps(&self) -> u64 {
        0
    }
}

impl MonitorModel for Mlp {
    fn steps(&self) -> u64 {
        self.param_count() as u64
    }
}

/// Check the restored models are the right kinds and shapes.
pub fn check_models(fault: &Mlp, rul: &Mlp) -> Result<(), PipelineError> {
    if fault.kind != ModelKind::Classifier || fault.output_dim() != 4 || fault.input_dim() != 2 {
        return Err(PipelineError::Model(
            "fault model must be a 2-input, 4-class classifier".into(),
        ));
    }
    if rul.kind != ModelKind::Regressor || rul.output_dim() != 1 || rul.input_dim() != 2 {
        return Err(PipelineError::Model(
            "RUL model must be a 2-input, 1-output regressor".into(),
        ));
    }
    Ok(())
}

struct Analyzer<'m, F, R> {
    cfg: MonitorConfig,
    fault: &'m F,
    rul: &'m R,
    carry: Vec<f64>,
    /// Global index of the next sample to arrive.
    next_global: u64,
    last_handled: Option<u64>,
    per_cycle: Vec<f64>,
    started: Instant,
}

impl<F: MonitorModel, R: MonitorModel> Analyzer<'_, F, R> {
    fn infer(&self, x: &[f64]) -> Result<([f64; 4], f64), NnError> {
        let p = self.fault.predict(x)?;
        let probs: [f64; 4] = p
            .as_slice()
            .try_into()
            .map_err(|_| NnError::Shape(format!("fault model returned {} outputs", p.len())))?;
        let rul = self
            .rul
            .predict(x)?
            .first()
            .copied()
            .ok_or_else(|| NnError::Shape("RUL model returned nothing".into()))?;
        Ok((probs, rul))
    }

    fn event_steps(&self) -> u64 {
        (self.cfg.extraction.span() as u64) + self.fault.steps() + self.rul.steps()
    }

    /// Analyse one bank; returns the virtual cost in seconds when the
    /// step model is active.
    fn process(
        &mut self,
        seq: u64,
        codes: &[u16],
        emit: &mut dyn FnMut(MonitorRecord),
    ) -> Option<f64> {
        let ex = self.cfg.extraction;
        let mut window = std::mem::take(&mut self.carry);
        let window_start = self.next_global - window.len() as u64;
        window.extend(codes.iter().map(|&c| self.cfg.adc.decode(c)));
        self.next_global += codes.len() as u64;
        let mut steps = codes.len() as u64;

        for edge in scan_edges(&window, &ex) {
            let g = window_start + edge.zero_index as u64;
            if self.last_handled.is_some_and(|last| g <= last) {
                continue;
            }
            match edge.status {
                EdgeStatus::NoLookahead => continue,
                EdgeStatus::NoHistory => {
                    // only reachable at the very start of the stream
                    self.last_handled = Some(g);
                    emit(MonitorRecord::Diagnostic(Diagnostic {
                        buffer_seq: seq,
                        zero_index: g,
                        message: FeatureError::OutOfBounds {
                            zero_index: edge.zero_index,
                        }
                        .to_string(),
                    }));
                    continue;
                }
                EdgeStatus::Accepted => {}
            }
            self.last_handled = Some(g);
            let t0 = Instant::now();
            let result = extract_features(&window, edge.zero_index, &ex)
                .map_err(|e| e.to_string())
                .and_then(|f| {
                    self.infer(&f.vector().to_array())
                        .map_err(|e| e.to_string())
                });
            let wall = t0.elapsed().as_secs_f64();
            match result {
                Ok((fault_probs, rul)) => {
                    let it_pc = match (self.cfg.clock, self.cfg.cost_model) {
                        (Clock::Virtual, CostModel::Steps) => {
                            self.event_steps() as f64 * VIRTUAL_STEP_SECONDS
                        }
                        _ => wall,
                    };
                    steps += self.event_steps();
                    self.per_cycle.push(it_pc);
                    let timestamp = match self.cfg.clock {
                        Clock::Virtual => g as f64 / self.cfg.fs,
                        Clock::Realtime => self.started.elapsed().as_secs_f64(),
                    };
                    emit(MonitorRecord::Event(MonitorEvent {
                        buffer_seq: seq,
                        zero_index: g,
                        fault_probs,
                        predicted_class: FaultLabel::from_index(argmax(&fault_probs))
                            .expect("4 classes"),
                        rul,
                        alarm: alarm_predicate(&fault_probs, rul, &self.cfg),
                        it_pc,
                        timestamp,
                    }));
                }
                Err(message) => emit(MonitorRecord::Diagnostic(Diagnostic {
                    buffer_seq: seq,
                    zero_index: g,
                    message,
                })),
            }
        }

        let keep = ex.span().min(window.len());
        window.drain(..window.len() - keep);
        self.carry = window;
        match (self.cfg.clock, self.cfg.cost_model) {
            (Clock::Virtual, CostModel::Steps) => Some(steps as f64 * VIRTUAL_STEP_SECONDS),
            _ => None,
        }
    }

    /// Edges still waiting for lookahead when the stream ends.
    fn finish(&mut self, seq: u64, emit: &mut dyn FnMut(MonitorRecord)) {
        let window_start = self.next_global - self.carry.len() as u64;
        for edge in scan_edges(&self.carry, &self.cfg.extraction) {
            let g = window_start + edge.zero_index as u64;
            if edge.status == EdgeStatus::NoLookahead
                && self.last_handled.is_none_or(|last| g > last)
            {
                self.last_handled = Some(g);
                emit(MonitorRecord::Diagnostic(Diagnostic {
                    buffer_seq: seq,
                    zero_index: g,
                    message: "actuation truncated by end of stream".into(),
                }));
            }
        }
    }
}

/// Result of a monitor run.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorOutput {
    pub report: TimingReport,
    pub measurements: Measurements,
}

/// Run the full loop over `source`, passing every record to `sink` as it
/// is produced (from the consumer context).
pub fn run_monitor<I, F, R, S>(
    source: I,
    fault_model: &F,
    rul_model: &R,
    cfg: &MonitorConfig,
    mut sink: S,
) -> Result<MonitorOutput, PipelineError>
where
    I: IntoIterator<Item = u16>,
    F: MonitorModel,
    R: MonitorModel,
    S: FnMut(MonitorRecord) + Send,
{
    cfg.validate()?;
    let mut analyzer = Analyzer {
        cfg: *cfg,
        fault: fault_model,
        rul: rul_model,
        carry: Vec::new(),
        next_global: 0,
        last_handled: None,
        per_cycle: Vec::new(),
        started: Instant::now(),
    };
    let mut last_seq = 0;
    let (_, mut measurements) = run_acquisition(source, &cfg.acquisition(), |bank| {
        last_seq = bank.seq();
        let cost = analyzer.process(bank.seq(), bank, &mut sink);
        cost.map(std::time::Duration::from_secs_f64)
    })?;
    analyzer.finish(last_seq, &mut sink);
    measurements.per_cycle = std::mem::take(&mut analyzer.per_cycle);
    let report = TimingReport::from_measurements(&cfg.acquisition(), &measurements)?;
    Ok(MonitorOutput {
        report,
        measurements,
    })
}

/// Collect every record instead of streaming.
pub fn run_monitor_collect<I, F, R>(
    source: I,
    fault_model: &F,
    rul_model: &R,
    cfg: &MonitorConfig,
) -> Result<(Vec<MonitorRecord>, MonitorOutput), PipelineError>
where
    I: IntoIterator<Item = u16>,
    F: MonitorModel,
    R: MonitorModel,
{
    let mut records = Vec::new();
    let out = run_monitor(source, fault_model, rul_model, cfg, |r| records.push(r))?;
    Ok((records, out))
}

/// What the simulated valve does over the stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    /// Every actuation under the same condition.
    Steady(FaultCondition),
    /// A healthy valve wearing out: actuation `j` happens at cycle
    /// `j·stride`, ending just before `failure_cycle`.
    Degradation { failure_cycle: u64, stride: u64 },
}

/// Synthesized raw ADC stream with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStream {
    pub codes: Vec<u16>,
    pub triggers: Vec<usize>,
    /// Valve cycle count at each trigger.
    pub cycles: Vec<u64>,
    pub failure_cycle: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Actuations for steady scenarios (degradation derives its own count).
    pub actuations: usize,
    pub f_op: f64,
    pub fs: f64,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn build_scenario(cfg: &ScenarioConfig) -> Result<ScenarioStream, PipelineError> {
    let (states, failure): (Vec<(FaultCondition, DegradationState)>, Option<u64>) =
        match cfg.scenario {
            Scenario::Steady(fault) => (
                vec![(fault, DegradationState::healthy()); cfg.actuations],
                None,
            ),
            Scenario::Degradation {
                failure_cycle,
                stride,
            } => {
                if failure_cycle == 0 || stride == 0 {
                    return Err(PipelineError::Parameter(
                        "failure_cycle and stride must be >= 1".into(),
                    ));
                }
                let states = (0..failure_cycle)
                    .step_by(stride as usize)
                    .map(|c| {
                        Ok((
                            FaultCondition::Good,
                            DegradationState::new(c, failure_cycle)?,
                        ))
                    })
                    .collect::<Result<_, WaveformError>>()?;
                (states, Some(failure_cycle))
            }
        };
    let opts = SynthOptions {
        noise_std: cfg.noise_std,
        seed: cfg.seed,
        adc: AdcConfig {
            sample_rate: cfg.fs,
            ..AdcConfig::default()
        },
        ..SynthOptions::default()
    };
    let schedule = ActuationSchedule {
        f_op: cfg.f_op,
        ..ActuationSchedule::default()
    };
    let stream = synth_actuation_train(&ValveParams::default(), &states, &schedule, &opts)?;
    let codes = stream.trace.to_codes(&opts.adc);
    Ok(ScenarioStream {
        codes,
        triggers: stream.triggers,
        cycles: states.iter().map(|(_, d)| d.cycle).collect(),
        failure_cycle: failure,
    })
}
