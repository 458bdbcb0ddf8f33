//! Solenoid drive-current synthesis and the sensing chain model.
//!
//! The sensing chain is a high-side shunt amplifier (`G = Rs·Rl / 1 kΩ`)
//! feeding a unipolar SAR ADC. Synthetic transients are a first-order rise
//! toward the settling current minus a Gaussian notch where the plunger
//! moves, optionally reshaped by fault, degradation and environment.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rated supply voltage of the simulated valve, in volts.
pub const RATED_VOLTAGE: f64 = 24.0;

/// Reference temperature (°C) at which the temperature hook is neutral.
pub const REFERENCE_TEMPERATURE: f64 = 26.0;

/// Fractional AUC loss per °C above [`REFERENCE_TEMPERATURE`].
pub const TEMPERATURE_COEFF: f64 = 0.003;

/// Additive pre-dip peak current per bar above 1 bar, in mA.
pub const PRESSURE_PEAK_MA_PER_BAR: f64 = 2.0;

/// Holding-current loss at full wear, as a multiple of the valve's dip depth.
pub const WEAR_SAG_RATIO: f64 = 1.25;

/// Spring failure moves the dip this many times later...
pub const SPRING_DIP_DELAY: f64 = 1.6;
/// ...and keeps this fraction of its depth.
pub const SPRING_DIP_RETAIN: f64 = 0.6;

/// Minimum idle lead-in accepted by [`synth_transient`], in ms.
pub const MIN_PRE_MS: f64 = 60.0;
/// Minimum post-actuation span accepted by [`synth_transient`], in ms.
pub const MIN_POST_MS: f64 = 105.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveformError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("raw code {code} outside [0, {max}]")]
    CodeRange { code: u32, max: u32 },
    #[error("trace csv line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WaveformError {
    fn from(e: std::io::Error) -> Self {
        WaveformError::Io(e.to_string())
    }
}

fn param<T>(msg: impl Into<String>) -> Result<T, WaveformError> {
    Err(WaveformError::Parameter(msg.into()))
}

/// Electrical and environmental description of one valve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValveParams {
    pub supply_voltage: f64,
    /// Settling current at rated voltage, mA.
    pub settling_current: f64,
    /// Exponential rise constant, ms.
    pub rise_tau: f64,
    /// Centre of the plunger dip relative to actuation, ms.
    pub dip_time: f64,
    pub dip_depth: f64,
    pub dip_width: f64,
    /// Pre-actuation baseline, mA.
    pub idle_current: f64,
    /// °C
    pub temperature: f64,
    /// bar
    pub pressure: f64,
}

impl Default for ValveParams {
    fn default() -> Self {
        Self {
            supply_voltage: RATED_VOLTAGE,
            settling_current: 250.0,
            rise_tau: 2.0,
            dip_time: 15.0,
            dip_depth: 60.0,
            dip_width: 3.0,
            idle_current: 0.0,
            temperature: REFERENCE_TEMPERATURE,
            pressure: 1.0,
        }
    }
}

impl ValveParams {
    pub fn validate(&self) -> Result<(), WaveformError> {
        let all = [
            self.supply_voltage,
            self.settling_current,
            self.rise_tau,
            self.dip_time,
            self.dip_depth,
            self.dip_width,
            self.idle_current,
            self.temperature,
            self.pressure,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return param("valve parameters must be finite");
        }
        if self.settling_current <= 0.0 {
            return param("settling_current must be > 0");
        }
        if self.rise_tau <= 0.0 {
            return param("rise_tau must be > 0");
        }
        if self.dip_width <= 0.0 {
            return param("dip_width must be > 0");
        }
        if self.dip_depth < 0.0 {
            return param("dip_depth must be >= 0");
        }
        if self.idle_current >= 0.05 * self.settling_current {
            return param("idle_current must stay below 5% of settling_current");
        }
        Ok(())
    }
}

/// Injected health condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultCondition {
    Good,
    SpoolStuck,
    SpringFailure,
    UnderVoltage { applied_voltage: f64 },
}

impl FaultCondition {
    pub fn validate(&self) -> Result<(), WaveformError> {
        if let FaultCondition::UnderVoltage { applied_voltage } = *self {
            if !(8.0..RATED_VOLTAGE).contains(&applied_voltage) {
                return param(format!(
                    "under-voltage supply {applied_voltage} V outside [8, 24)"
                ));
            }
        }
        Ok(())
    }
}

/// Position of a valve along its run-to-failure trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationState {
    pub cycle: u64,
    pub failure_cycle: u64,
}

impl DegradationState {
    pub fn new(cycle: u64, failure_cycle: u64) -> Result<Self, WaveformError> {
        if failure_cycle == 0 {
            return param("failure_cycle must be > 0");
        }
        Ok(Self {
            cycle,
            failure_cycle,
        })
    }

    /// A brand-new valve.
    pub fn healthy() -> Self {
        Self {
            cycle: 0,
            failure_cycle: 1500,
        }
    }

    /// `cycle / failure_cycle`, clamped to `[0, 1]`.
    pub fn severity(&self) -> f64 {
        (self.cycle as f64 / self.failure_cycle.max(1) as f64).clamp(0.0, 1.0)
    }

    pub fn remaining_cycles(&self) -> u64 {
        self.failure_cycle.saturating_sub(self.cycle)
    }
}

/// Advance a valve by `cycles` actuations.
pub fn degrade(deg: DegradationState, cycles: u64) -> DegradationState {
    DegradationState {
        cycle: deg.cycle.saturating_add(cycles),
        failure_cycle: deg.failure_cycle,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcConfig {
    pub full_scale: f64,
    pub bits: u32,
    pub gain: f64,
    pub sample_rate: f64,
}

impl Default for AdcConfig {
    fn default() -> Self {
        Self {
            full_scale: 3.3,
            bits: 12,
            gain: 12.22,
            sample_rate: 1000.0,
        }
    }
}

impl AdcConfig {
    pub fn validate(&self) -> Result<(), WaveformError> {
        if !(8..=16).contains(&self.bits) {
            return param("adc bits must be in [8, 16]");
        }
        if !(self.full_scale > 0.0 && self.gain > 0.0 && self.sample_rate > 0.0) {
            return param("full_scale, gain and sample_rate must be > 0");
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Current represented by one code step, mA.
    pub fn lsb_ma(&self) -> f64 {
        self.full_scale / self.max_code() as f64 / self.gain * 1000.0
    }

    /// Current that saturates the converter, mA.
    pub fn full_scale_ma(&self) -> f64 {
        self.full_scale / self.gain * 1000.0
    }

    /// Whole chain: current in mA to raw code.
    pub fn encode(&self, current_ma: f64) -> u16 {
        adc_quantize(current_to_voltage(current_ma, self.gain), self) as u16
    }

    /// Whole chain inverse, saturating codes above range to full scale.
    pub fn decode(&self, code: u16) -> f64 {
        let c = (code as u32).min(self.max_code());
        c as f64 / self.max_code() as f64 * self.full_scale / self.gain * 1000.0
    }
}

/// Shunt amplifier gain for sense resistor `rs` and load resistor `rl` (ohms).
pub fn sensor_gain(rs: f64, rl: f64) -> f64 {
    rs * rl / 1000.0
}

/// Amplifier output in volts for a current in mA.
pub fn current_to_voltage(i_ma: f64, gain: f64) -> f64 {
    i_ma / 1000.0 * gain
}

/// Truncating quantizer, saturating at both rails.
pub fn adc_quantize(v: f64, cfg: &AdcConfig) -> u32 {
    let max = cfg.max_code();
    let x = (v.clamp(0.0, cfg.full_scale) / cfg.full_scale * max as f64).floor();
    // NaN casts to 0
    (x as u32).min(max)
}

pub fn raw_to_current(code: u32, cfg: &AdcConfig) -> Result<f64, WaveformError> {
    let max = cfg.max_code();
    if code > max {
        return Err(WaveformError::CodeRange { code, max });
    }
    Ok(code as f64 / max as f64 * cfg.full_scale / cfg.gain * 1000.0)
}

/// Uniformly sampled drive current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransientTrace {
    /// mA
    pub samples: Vec<f64>,
    /// Hz
    pub sample_rate: f64,
    /// Ground-truth actuation start, when known.
    pub trigger_index: Option<usize>,
}

impl TransientTrace {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self, WaveformError> {
        if samples.is_empty() {
            return param("trace must contain at least one sample");
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return param("trace samples must be finite");
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return param("sample_rate must be > 0");
        }
        Ok(Self {
            samples,
            sample_rate,
            trigger_index: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_ms(&self, index: usize) -> f64 {
        index as f64 * 1000.0 / self.sample_rate
    }

    /// Convert every sample through the ADC chain.
    pub fn to_codes(&self, adc: &AdcConfig) -> Vec<u16> {
        self.samples.iter().map(|&i| adc.encode(i)).collect()
    }

    /// Writes `t_ms,current_mA` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), WaveformError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let csv_err = |e: csv::Error| WaveformError::Io(e.to_string());
        w.write_record(["t_ms", "current_mA"]).map_err(csv_err)?;
        for (idx, v) in self.samples.iter().enumerate() {
            w.write_record([self.time_ms(idx).to_string(), v.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a trace CSV. The sample rate is recovered from the first
    /// time step and every later step must match it.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, WaveformError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(input);
        let header_line = 1;
        let headers = rdr.headers().map_err(|e| WaveformError::Csv {
            line: header_line,
            msg: e.to_string(),
        })?;
        if headers.len() != 2 || &headers[0] != "t_ms" || &headers[1] != "current_mA" {
            return Err(WaveformError::Csv {
                line: header_line,
                msg: "expected header `t_ms,current_mA`".into(),
            });
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| WaveformError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| WaveformError::Csv { line, msg };
            let t: f64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad t_ms `{}`", &rec[0])))?;
            let i: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad current_mA `{}`", &rec[1])))?;
            if !t.is_finite() || !i.is_finite() {
                return Err(bad("non-finite value".into()));
            }
            if let Some(&prev) = times.last() {
                if t <= prev {
                    return Err(bad("t_ms must be strictly increasing".into()));
                }
                if times.len() >= 2 {
                    let step = times[1] - times[0];
                    let expect = times[0] + step * times.len() as f64;
                    if (t - expect).abs() > 1e-6 * step.max(1.0) * (times.len() as f64).max(1.0) {
                        return Err(bad(format!("t_ms {t} breaks uniform spacing {step}")));
                    }
                }
            }
            times.push(t);
            samples.push(i);
        }
        if samples.is_empty() {
            return Err(WaveformError::Csv {
                line: header_line,
                msg: "trace has no samples".into(),
            });
        }
        let sample_rate = if times.len() >= 2 {
            1000.0 / (times[1] - times[0])
        } else {
            1000.0
        };
        TransientTrace::new(samples, sample_rate)
    }
}

/// Knobs that are not part of the valve itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    /// Standard deviation of analog white noise, mA.
    pub noise_std: f64,
    pub seed: u64,
    pub pre_ms: f64,
    pub post_ms: f64,
    pub adc: AdcConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            noise_std: 0.0,
            seed: 0,
            pre_ms: 60.0,
            post_ms: 140.0,
            adc: AdcConfig::default(),
        }
    }
}

/// The noiseless analog shape after fault, degradation and environment
/// have been folded in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveShape {
    pub settling_current: f64,
    pub rise_tau: f64,
    pub dip_time: f64,
    pub dip_depth: f64,
    pub dip_width: f64,
    pub peak_boost: f64,
    /// Late current loss from wear, mA; settles in around the dip.
    pub sag_depth: f64,
    pub sag_center: f64,
    pub scale: f64,
    pub idle_current: f64,
}

impl EffectiveShape {
    pub fn new(p: &ValveParams, fault: FaultCondition, deg: DegradationState) -> Self {
        let s = deg.severity();
        let mut settling = p.settling_current;
        let mut dip_time = p.dip_time;
        let mut dip_depth = p.dip_depth;
        let mut ratio = 1.0;
        match fault {
            FaultCondition::Good => {}
            FaultCondition::SpoolStuck => dip_depth = 0.0,
            FaultCondition::SpringFailure => {
                dip_time *= SPRING_DIP_DELAY;
                dip_depth *= SPRING_DIP_RETAIN;
            }
            FaultCondition::UnderVoltage { applied_voltage } => {
                ratio = applied_voltage / RATED_VOLTAGE;
                settling *= ratio;
                dip_depth *= ratio;
            }
        }
        Self {
            settling_current: settling,
            rise_tau: p.rise_tau,
            dip_time,
            dip_depth: dip_depth * (1.0 - s),
            dip_width: p.dip_width,
            peak_boost: PRESSURE_PEAK_MA_PER_BAR * (p.pressure - 1.0),
            sag_depth: WEAR_SAG_RATIO * p.dip_depth * ratio * s,
            sag_center: p.dip_time - 2.0 * p.dip_width,
            scale: 1.0 - TEMPERATURE_COEFF * (p.temperature - REFERENCE_TEMPERATURE),
            idle_current: p.idle_current,
        }
    }

    /// Rise component alone at `t_ms` after actuation.
    pub fn rise(&self, t_ms: f64) -> f64 {
        self.settling_current * (1.0 - (-t_ms / self.rise_tau).exp())
    }

    /// Analog current at `t_ms` relative to actuation.
    pub fn current(&self, t_ms: f64) -> f64 {
        if t_ms < 0.0 {
            return self.idle_current;
        }
        let w2 = 2.0 * self.dip_width * self.dip_width;
        let notch = self.dip_depth * (-(t_ms - self.dip_time).powi(2) / w2).exp();
        let bump_center = self.dip_time - 2.0 * self.dip_width;
        let bump = self.peak_boost * (-(t_ms - bump_center).powi(2) / w2).exp();
        // logistic step, steep enough to cover the notch it replaces
        let sag = self.sag_depth / (1.0 + (-2.0 * (t_ms - self.sag_center) / self.dip_width).exp());
        self.idle_current + self.scale * (self.rise(t_ms) - notch + bump - sag)
    }
}

fn check_options(opts: &SynthOptions) -> Result<(), WaveformError> {
    opts.adc.validate()?;
    if !(opts.noise_std.is_finite() && opts.noise_std >= 0.0) {
        return param("noise_std must be finite and >= 0");
    }
    if !(opts.pre_ms >= MIN_PRE_MS) {
        return param(format!("pre_ms must be >= {MIN_PRE_MS}"));
    }
    if !(opts.post_ms >= MIN_POST_MS) {
        return param(format!("post_ms must be >= {MIN_POST_MS}"));
    }
    Ok(())
}

fn noise_source(opts: &SynthOptions) -> Result<(ChaCha8Rng, Option<Normal<f64>>), WaveformError> {
    let rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = if opts.noise_std > 0.0 {
        Some(
            Normal::new(0.0, opts.noise_std)
                .map_err(|e| WaveformError::Parameter(e.to_string()))?,
        )
    } else {
        None
    };
    Ok((rng, normal))
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

/// Synthesize one actuation: `pre_ms` of idle followed by `post_ms` of
/// drive current, quantized through `opts.adc` and reported in mA.
pub fn synth_transient(
    params: &ValveParams,
    fault: FaultCondition,
    deg: DegradationState,
    opts: &SynthOptions,
) -> Result<TransientTrace, WaveformError> {
    params.validate()?;
    fault.validate()?;
    check_options(opts)?;
    let fs = opts.adc.sample_rate;
    let shape = EffectiveShape::new(params, fault, deg);
    let n_pre = ms_to_samples(opts.pre_ms, fs);
    let n = n_pre + ms_to_samples(opts.post_ms, fs);
    let (mut rng, normal) = noise_source(opts)?;
    let samples = (0..n)
        .map(|idx| {
            let t = (idx as f64 - n_pre as f64) * 1000.0 / fs;
            let mut i = shape.current(t);
            if let Some(d) = &normal {
                i += d.sample(&mut rng);
            }
            opts.adc.decode(opts.adc.encode(i))
        })
        .collect();
    let mut trace = TransientTrace::new(samples, fs)?;
    trace.trigger_index = Some(n_pre);
    Ok(trace)
}

/// Timing of a periodic actuation train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuationSchedule {
    /// Actuation frequency, Hz.
    pub f_op: f64,
    /// Fraction of each period the coil is energised.
    pub duty: f64,
    /// Idle time before the first actuation, ms.
    pub lead_ms: f64,
    /// Decay constant after de-energising, ms.
    pub off_tau: f64,
}

impl Default for ActuationSchedule {
    fn default() -> Self {
        Self {
            f_op: 1.0,
            duty: 0.5,
            lead_ms: 100.0,
            off_tau: 2.0,
        }
    }
}

/// A synthesized stream of repeated actuations with ground-truth triggers.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationStream {
    pub trace: TransientTrace,
    pub triggers: Vec<usize>,
}

/// Periodic actuations, one per entry of `cycles`, each with its own fault
/// and degradation state. The stream ends one full period after the last
/// trigger.
pub fn synth_actuation_train(
    params: &ValveParams,
    cycles: &[(FaultCondition, DegradationState)],
    schedule: &ActuationSchedule,
    opts: &SynthOptions,
) -> Result<ActuationStream, WaveformError> {
    params.validate()?;
    opts.adc.validate()?;
    if !(schedule.f_op > 0.0 && schedule.f_op.is_finite()) {
        return param("f_op must be > 0");
    }
    if !(schedule.duty > 0.0 && schedule.duty < 1.0) {
        return param("duty must be in (0, 1)");
    }
    if !(schedule.off_tau > 0.0) || !(schedule.lead_ms >= 0.0) {
        return param("off_tau must be > 0 and lead_ms >= 0");
    }
    let fs = opts.adc.sample_rate;
    let period = ms_to_samples(1000.0 / schedule.f_op, fs);
    let on = ms_to_samples(1000.0 * schedule.duty / schedule.f_op, fs);
    if on < ms_to_samples(MIN_POST_MS, fs) || period - on < ms_to_samples(MIN_PRE_MS, fs) {
        return param("actuation period too short for a full transient frame");
    }
    let lead = ms_to_samples(schedule.lead_ms, fs);
    let total = lead + period * cycles.len();
    let (mut rng, normal) = noise_source(opts)?;
    let mut samples = vec![params.idle_current; total];
    let mut triggers = Vec::with_capacity(cycles.len());
    for (c, (fault, deg)) in cycles.iter().enumerate() {
        fault.validate()?;
        let shape = EffectiveShape::new(params, *fault, *deg);
        let start = lead + c * period;
        triggers.push(start);
        let off_level = shape.current((on as f64) * 1000.0 / fs) - params.idle_current;
        for k in 0..period {
            let t = k as f64 * 1000.0 / fs;
            samples[start + k] = if k < on {
                shape.current(t)
            } else {
                let dt = (k - on) as f64 * 1000.0 / fs;
                params.idle_current + off_level * (-dt / schedule.off_tau).exp()
            };
        }
    }
    for s in samples.iter_mut() {
        let mut i = *s;
        if let Some(d) = &normal {
            i += d.sample(&mut rng);
        }
        *s = opts.adc.decode(opts.adc.encode(i));
    }
    let trace = TransientTrace::new(samples, fs)?;
    Ok(ActuationStream { trace, triggers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lsb() -> f64 {
        AdcConfig::default().lsb_ma()
    }

    #[test]
    fn gain_examples() {
        assert_abs_diff_eq!(sensor_gain(0.1, 122_000.0), 12.2, epsilon = 1e-12);
        assert_eq!(sensor_gain(0.0, 122_000.0), 0.0);
        assert_abs_diff_eq!(sensor_gain(1.0, 1000.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn voltage_examples() {
        assert_abs_diff_eq!(current_to_voltage(270.0, 12.22), 3.2994, epsilon = 1e-9);
        assert_eq!(current_to_voltage(0.0, 12.22), 0.0);
        assert_abs_diff_eq!(current_to_voltage(100.0, 10.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quantizer_examples() {
        let cfg = AdcConfig::default();
        assert_eq!(adc_quantize(3.3, &cfg), 4095);
        assert_eq!(adc_quantize(0.0, &cfg), 0);
        assert_eq!(adc_quantize(1.65, &cfg), 2047);
        assert_eq!(adc_quantize(-1.0, &cfg), 0);
        assert_eq!(adc_quantize(9.0, &cfg), 4095);
        assert_eq!(adc_quantize(f64::NAN, &cfg), 0);
    }

    #[test]
    fn raw_to_current_examples() {
        let cfg = AdcConfig::default();
        assert_abs_diff_eq!(
            raw_to_current(4095, &cfg).unwrap(),
            3.3 / 12.22 * 1000.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(raw_to_current(4095, &cfg).unwrap(), 270.05, epsilon = 0.01);
        assert_eq!(raw_to_current(0, &cfg).unwrap(), 0.0);
        // 2047/4095 of the 270.049 mA full scale
        assert_abs_diff_eq!(raw_to_current(2047, &cfg).unwrap(), 134.99, epsilon = 0.01);
        assert_eq!(
            raw_to_current(4096, &cfg),
            Err(WaveformError::CodeRange {
                code: 4096,
                max: 4095
            })
        );
    }

    #[test]
    fn degrade_examples() {
        let s = |c, f| degrade(DegradationState::new(c, f).unwrap(), 0).severity();
        assert_eq!(s(0, 1500), 0.0);
        assert_eq!(s(1500, 1500), 1.0);
        assert_eq!(s(750, 1500), 0.5);
        let d = degrade(DegradationState::new(1400, 1500).unwrap(), 500);
        assert_eq!(d.cycle, 1900);
        assert_eq!(d.severity(), 1.0);
        assert!(DegradationState::new(0, 0).is_err());
    }

    #[test]
    fn under_voltage_plateau_is_halved_at_12v() {
        let p = ValveParams::default();
        let opts = SynthOptions::default();
        let tr = synth_transient(
            &p,
            FaultCondition::UnderVoltage {
                applied_voltage: 12.0,
            },
            DegradationState::healthy(),
            &opts,
        )
        .unwrap();
        let last = *tr.samples.last().unwrap();
        assert!((last - 125.0).abs() <= lsb(), "plateau {last}");
    }

    #[test]
    fn spool_stuck_has_no_notch() {
        let p = ValveParams::default();
        let tr = synth_transient(
            &p,
            FaultCondition::SpoolStuck,
            DegradationState::healthy(),
            &SynthOptions::default(),
        )
        .unwrap();
        let z = tr.trigger_index.unwrap();
        let shape = EffectiveShape::new(&p, FaultCondition::Good, DegradationState::healthy());
        let lo = (p.dip_time - 3.0 * p.dip_width).round() as usize;
        let hi = (p.dip_time + 3.0 * p.dip_width).round() as usize;
        for k in lo..=hi {
            assert!((tr.samples[z + k] - shape.rise(k as f64)).abs() <= lsb());
        }
    }

    #[test]
    fn good_valve_dips_below_rise() {
        let p = ValveParams::default();
        let tr = synth_transient(
            &p,
            FaultCondition::Good,
            DegradationState::healthy(),
            &SynthOptions::default(),
        )
        .unwrap();
        let z = tr.trigger_index.unwrap();
        let at_dip = tr.samples[z + p.dip_time as usize];
        assert!(at_dip < 250.0 - 0.9 * p.dip_depth);
    }

    #[test]
    fn spring_failure_dip_is_later_and_shallower() {
        let p = ValveParams::default();
        let good = EffectiveShape::new(&p, FaultCondition::Good, DegradationState::healthy());
        let spring = EffectiveShape::new(
            &p,
            FaultCondition::SpringFailure,
            DegradationState::healthy(),
        );
        assert!(spring.dip_time > good.dip_time);
        assert!(spring.dip_depth < good.dip_depth && spring.dip_depth > 0.0);
    }

    #[test]
    fn full_degradation_matches_spool_stuck() {
        let p = ValveParams::default();
        let worn = DegradationState::new(1500, 1500).unwrap();
        let opts = SynthOptions {
            noise_std: 2.0,
            seed: 3,
            ..Default::default()
        };
        let a = synth_transient(&p, FaultCondition::Good, worn, &opts).unwrap();
        let b = synth_transient(&p, FaultCondition::SpoolStuck, worn, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let p = ValveParams::default();
        let opts = SynthOptions {
            noise_std: 3.0,
            seed: 42,
            ..Default::default()
        };
        let a =
            synth_transient(&p, FaultCondition::Good, DegradationState::healthy(), &opts).unwrap();
        let b =
            synth_transient(&p, FaultCondition::Good, DegradationState::healthy(), &opts).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = synth_transient(
            &p,
            FaultCondition::Good,
            DegradationState::healthy(),
            &SynthOptions { seed: 43, ..opts },
        )
        .unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn synth_rejects_bad_inputs() {
        let opts = SynthOptions::default();
        let healthy = DegradationState::healthy();
        let nan = ValveParams {
            rise_tau: f64::NAN,
            ..Default::default()
        };
        assert!(synth_transient(&nan, FaultCondition::Good, healthy, &opts).is_err());
        let uv = FaultCondition::UnderVoltage {
            applied_voltage: 5.0,
        };
        assert!(synth_transient(&ValveParams::default(), uv, healthy, &opts).is_err());
        let short = SynthOptions {
            pre_ms: 20.0,
            ..opts
        };
        assert!(synth_transient(
            &ValveParams::default(),
            FaultCondition::Good,
            healthy,
            &short
        )
        .is_err());
        let idle = ValveParams {
            idle_current: 20.0,
            ..Default::default()
        };
        assert!(synth_transient(&idle, FaultCondition::Good, healthy, &opts).is_err());
    }

    #[test]
    fn environment_hooks_move_in_stated_directions() {
        let healthy = DegradationState::healthy();
        let warm = ValveParams {
            temperature: 60.0,
            ..Default::default()
        };
        let base = EffectiveShape::new(&ValveParams::default(), FaultCondition::Good, healthy);
        let hot = EffectiveShape::new(&warm, FaultCondition::Good, healthy);
        assert!(hot.current(25.0) < base.current(25.0));
        let pressed = ValveParams {
            pressure: 4.0,
            ..Default::default()
        };
        let hp = EffectiveShape::new(&pressed, FaultCondition::Good, healthy);
        let peak = |s: &EffectiveShape| {
            (0..15)
                .map(|t| s.current(t as f64))
                .fold(f64::MIN, f64::max)
        };
        assert!(peak(&hp) > peak(&base));
    }

    #[test]
    fn trace_csv_round_trip_and_errors() {
        let tr = TransientTrace::new(vec![0.0, 1.5, 250.25], 1000.0).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "t_ms,current_mA\n0,0\n1,1.5\n2,250.25\n");
        let back = TransientTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.samples, tr.samples);
        assert_eq!(back.sample_rate, 1000.0);

        let err = TransientTrace::read_csv("t_ms,current_mA\n0,1\n1,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, WaveformError::Csv { line: 3, .. }), "{err:?}");
        let err =
            TransientTrace::read_csv("t_ms,current_mA\n0,1\n1,2\n5,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, WaveformError::Csv { line: 4, .. }), "{err:?}");
        let err = TransientTrace::read_csv("t_ms,current_mA\n0,1\n1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, WaveformError::Csv { line: 3, .. }), "{err:?}");
        assert!(TransientTrace::read_csv("a,b\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn actuation_train_places_triggers_on_period() {
        let p = ValveParams::default();
        let cycles = vec![(FaultCondition::Good, DegradationState::healthy()); 3];
        let sched = ActuationSchedule {
            f_op: 2.0,
            ..Default::default()
        };
        let s = synth_actuation_train(&p, &cycles, &sched, &SynthOptions::default()).unwrap();
        assert_eq!(s.triggers, vec![100, 600, 1100]);
        assert_eq!(s.trace.len(), 100 + 3 * 500);
        // de-energised well before the next trigger
        assert!(s.trace.samples[599] <= lsb());
        let fast = ActuationSchedule {
            f_op: 10.0,
            ..Default::default()
        };
        assert!(synth_actuation_train(&p, &cycles, &fast, &SynthOptions::default()).is_err());
    }
}
