//! The fault classifier and RUL regressor, plus the datasets they train on.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{extract_all, ExtractionConfig, FeatureVector};
use crate::tinynn::{
    self, Activation, Example, LayerSpec, Loss, Mlp, ModelKind, NnError, Scaler, TrainConfig,
    TrainHistory,
};
use crate::waveform::{
    synth_transient, DegradationState, FaultCondition, SynthOptions, ValveParams, WaveformError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dataset kind mismatch: expected {expected:?}, found {found:?}")]
    KindMismatch {
        expected: DatasetKind,
        found: DatasetKind,
    },
    #[error("dataset csv line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("feature extraction kept failing for {what} after {attempts} attempts")]
    Extraction { what: String, attempts: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error("io error: {0}")]
    Io(String),
}

fn param<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Parameter(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultLabel {
    Good,
    SpoolStuck,
    SpringFailure,
    UnderVoltage,
}

impl FaultLabel {
    pub const ALL: [FaultLabel; 4] = [
        FaultLabel::Good,
        FaultLabel::SpoolStuck,
        FaultLabel::SpringFailure,
        FaultLabel::UnderVoltage,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultLabel::Good => "good",
            FaultLabel::SpoolStuck => "spool_stuck",
            FaultLabel::SpringFailure => "spring_failure",
            FaultLabel::UnderVoltage => "under_voltage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    pub fn one_hot(self) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    pub fn of(fault: &FaultCondition) -> Self {
        match fault {
            FaultCondition::Good => FaultLabel::Good,
            FaultCondition::SpoolStuck => FaultLabel::SpoolStuck,
            FaultCondition::SpringFailure => FaultLabel::SpringFailure,
            FaultCondition::UnderVoltage { .. } => FaultLabel::UnderVoltage,
        }
    }
}

impl std::fmt::Display for FaultLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Class(FaultLabel),
    /// Remaining actuation cycles.
    Rul(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Fault,
    Rul,
}

impl Target {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Target::Class(_) => DatasetKind::Fault,
            Target::Rul(_) => DatasetKind::Rul,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64, valve: u32 },
    Imported { line: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub features: FeatureVector,
    pub target: Target,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn new(rows: Vec<Row>) -> Result<Self, ModelError> {
        let ds = Self { rows };
        ds.kind()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Kind shared by every row; errors on empty or mixed sets.
    pub fn kind(&self) -> Result<DatasetKind, ModelError> {
        let first = match self.rows.first() {
            Some(r) => r.target.kind(),
            None => return param("dataset is empty"),
        };
        if let Some(r) = self.rows.iter().find(|r| r.target.kind() != first) {
            return Err(ModelError::KindMismatch {
                expected: first,
                found: r.target.kind(),
            });
        }
        Ok(first)
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.rows {
            if let Target::Class(l) = r.target {
                c[l.index()] += 1;
            }
        }
        c
    }

    fn examples(&self) -> Vec<Example> {
        self.rows
            .iter()
            .map(|r| {
                let y = match r.target {
                    Target::Class(l) => l.one_hot(),
                    Target::Rul(c) => vec![c as f64],
                };
                Example::new(r.features.to_array().to_vec(), y)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ModelError> {
        let io = |e: csv::Error| ModelError::Io(e.to_string());
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["di_dt", "auc", "target"]).map_err(io)?;
        for r in &self.rows {
            let target = match r.target {
                Target::Class(l) => l.name().to_string(),
                Target::Rul(c) => c.to_string(),
            };
            w.write_record([
                r.features.di_dt.to_string(),
                r.features.auc.to_string(),
                target,
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(input);
        let headers = rdr.headers().map_err(|e| ModelError::Csv {
            line: 1,
            msg: e.to_string(),
        })?;
        if headers.iter().collect::<Vec<_>>() != ["di_dt", "auc", "target"] {
            return Err(ModelError::Csv {
                line: 1,
                msg: "expected header `di_dt,auc,target`".into(),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ModelError::Csv {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |msg: String| ModelError::Csv { line, msg };
            let num = |s: &str, what: &str| -> Result<f64, ModelError> {
                match s.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(bad(format!("bad {what} `{s}`"))),
                }
            };
            let features = FeatureVector {
                di_dt: num(&rec[0], "di_dt")?,
                auc: num(&rec[1], "auc")?,
            };
            let t = rec[2].trim();
            let target = if let Some(l) = FaultLabel::parse(t) {
                Target::Class(l)
            } else if let Ok(c) = t.parse::<u64>() {
                Target::Rul(c)
            } else {
                return Err(bad(format!("unknown target `{t}`")));
            };
            if let Some(prev) = rows.first().map(|r: &Row| r.target.kind()) {
                if prev != target.kind() {
                    return Err(bad("rows mix class and cycle targets".into()));
                }
            }
            rows.push(Row {
                features,
                target,
                provenance: Provenance::Imported { line },
            });
        }
        if rows.is_empty() {
            return Err(ModelError::Csv {
                line: 1,
                msg: "dataset has no rows".into(),
            });
        }
        Ok(Dataset { rows })
    }
}

pub fn fault_model_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(2, 36, Activation::leaky()),
        LayerSpec::new(36, 24, Activation::leaky()),
        LayerSpec::new(24, 12, Activation::leaky()),
        LayerSpec::new(12, 4, Activation::Softmax),
    ]
}

pub fn rul_model_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(2, 64, Activation::Relu),
        LayerSpec::new(64, 16, Activation::Relu),
        LayerSpec::new(16, 4, Activation::Relu),
        LayerSpec::new(4, 1, Activation::Linear),
    ]
}

/// 2→36→24→12→4, LeakyReLU hidden, softmax output.
pub fn build_fault_model(seed: u64) -> Mlp {
    Mlp::new(ModelKind::Classifier, &fault_model_specs(), seed)
        .expect("fixed architecture is valid")
}

/// 2→64→16→4→1, ReLU hidden, linear output.
pub fn build_rul_model(seed: u64) -> Mlp {
    Mlp::new(ModelKind::Regressor, &rul_model_specs(), seed).expect("fixed architecture is valid")
}

/// Stratified (by class, for fault sets) three-way split.
pub fn split_dataset(
    ds: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), ModelError> {
    let kind = ds.kind()?;
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return param("split fractions must lie in [0, 1] and sum to 1");
    }
    let mut groups: Vec<Vec<usize>> = match kind {
        DatasetKind::Fault => {
            let mut g = vec![Vec::new(); 4];
            for (i, r) in ds.rows.iter().enumerate() {
                if let Target::Class(l) = r.target {
                    g[l.index()].push(i);
                }
            }
            g
        }
        DatasetKind::Rul => vec![(0..ds.len()).collect()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<Row>; 3] = Default::default();
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
        let n = g.len();
        let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
        for (pos, &i) in g.iter().enumerate() {
            let part = if pos < n_train {
                0
            } else if pos < n_train + n_val {
                1
            } else {
                2
            };
            parts[part].push(ds.rows[i]);
        }
    }
    if parts.iter().any(|p| p.is_empty()) {
        return param(format!(
            "split of {} rows by {fractions:?} leaves an empty partition",
            ds.len()
        ));
    }
    let [a, b, c] = parts;
    Ok((
        Dataset { rows: a },
        Dataset { rows: b },
        Dataset { rows: c },
    ))
}

/// Counter-based seed derivation (splitmix64 finaliser).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maximum re-synthesis attempts after a failed extraction.
pub const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultDatasetConfig {
    /// Rows per class in `FaultLabel::ALL` order.
    pub counts: [usize; 4],
    pub valves: usize,
    /// Relative jitter on rise and dip parameters across valves.
    pub jitter: f64,
    pub noise_std: f64,
    pub under_voltages: &'static [f64],
}

impl Default for FaultDatasetConfig {
    fn default() -> Self {
        Self {
            counts: [600, 200, 200, 400],
            valves: 9,
            jitter: 0.10,
            noise_std: 1.0,
            under_voltages: &[8.0, 10.0, 12.0, 14.0],
        }
    }
}

fn jittered_valve(rng: &mut ChaCha8Rng, jitter: f64) -> ValveParams {
    let mut j = |v: f64| v * (1.0 + rng.random_range(-jitter..=jitter));
    let base = ValveParams::default();
    ValveParams {
        rise_tau: j(base.rise_tau),
        dip_time: j(base.dip_time),
        dip_depth: j(base.dip_depth),
        dip_width: j(base.dip_width),
        ..base
    }
}

fn valves(seed: u64, n: usize, jitter: f64) -> Vec<ValveParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA11E, 0));
    (0..n).map(|_| jittered_valve(&mut rng, jitter)).collect()
}

fn features_with_retry(
    params: &ValveParams,
    fault: FaultCondition,
    deg: DegradationState,
    noise_std: f64,
    seed: u64,
    what: impl FnOnce() -> String,
) -> Result<(FeatureVector, u64), ModelError> {
    let cfg = ExtractionConfig::default();
    for attempt in 0..=MAX_RETRIES as u64 {
        let s = seed.wrapping_add(attempt);
        let opts = SynthOptions {
            noise_std,
            seed: s,
            ..SynthOptions::default()
        };
        let trace = synth_transient(params, fault, deg, &opts)?;
        if let Some(f) = extract_all(&trace, &cfg).features.first() {
            return Ok((f.vector(), s));
        }
    }
    Err(ModelError::Extraction {
        what: what(),
        attempts: MAX_RETRIES + 1,
    })
}

pub fn gen_fault_dataset(cfg: &FaultDatasetConfig, seed: u64) -> Result<Dataset, ModelError> {
    if cfg.counts.iter().sum::<usize>() == 0 {
        return param("at least one class count must be > 0");
    }
    if cfg.valves == 0 || cfg.under_voltages.is_empty() {
        return param("need at least one valve and one under-voltage level");
    }
    let fleet = valves(seed, cfg.valves, cfg.jitter);
    let mut rows = Vec::with_capacity(cfg.counts.iter().sum());
    for (label, &count) in FaultLabel::ALL.iter().zip(&cfg.counts) {
        for r in 0..count {
            let row_seed = mix_seed(seed, label.index() as u64 + 1, r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
            let valve = rng.random_range(0..fleet.len());
            let params = ValveParams {
                temperature: rng.random_range(22.0..30.0),
                pressure: rng.random_range(1.0..2.0),
                ..fleet[valve]
            };
            let fault = match label {
                FaultLabel::Good => FaultCondition::Good,
                FaultLabel::SpoolStuck => FaultCondition::SpoolStuck,
                FaultLabel::SpringFailure => FaultCondition::SpringFailure,
                FaultLabel::UnderVoltage => FaultCondition::UnderVoltage {
                    applied_voltage: cfg.under_voltages[r % cfg.under_voltages.len()],
                },
            };
            let noise_seed = rng.random();
            let (features, used) = features_with_retry(
                &params,
                fault,
                DegradationState::healthy(),
                cfg.noise_std,
                noise_seed,
                || format!("{label} row {r}"),
            )?;
            rows.push(Row {
                features,
                target: Target::Class(*label),
                provenance: Provenance::Synthetic {
                    seed: used,
                    valve: valve as u32,
                },
            });
        }
    }
    Ok(Dataset { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RulDatasetConfig {
    pub valves: usize,
    pub failure_cycle: u64,
    /// Cycles between captured actuations.
    pub sample_every: u64,
    pub jitter: f64,
    pub noise_std: f64,
}

impl Default for RulDatasetConfig {
    fn default() -> Self {
        Self {
            valves: 4,
            failure_cycle: 1500,
            sample_every: 5,
            jitter: 0.02,
            noise_std: 0.5,
        }
    }
}

/// One valve's run-to-failure trajectory, tagged as valve `valve`.
pub fn rul_trajectory(
    cfg: &RulDatasetConfig,
    params: &ValveParams,
    seed: u64,
    valve: u32,
) -> Result<Vec<Row>, ModelError> {
    let mut rows = Vec::new();
    let mut cycle = 0;
    while cycle < cfg.failure_cycle {
        let deg = DegradationState::new(cycle, cfg.failure_cycle)?;
        let (features, used) = features_with_retry(
            params,
            FaultCondition::Good,
            deg,
            cfg.noise_std,
            mix_seed(seed, valve as u64 + 0x100, cycle),
            || format!("valve {valve} cycle {cycle}"),
        )?;
        rows.push(Row {
            features,
            target: Target::Rul(cfg.failure_cycle - cycle),
            provenance: Provenance::Synthetic { seed: used, valve },
        });
        cycle += cfg.sample_every;
    }
    Ok(rows)
}

pub fn gen_rul_dataset(cfg: &RulDatasetConfig, seed: u64) -> Result<Dataset, ModelError> {
    if cfg.valves == 0 || cfg.failure_cycle == 0 || cfg.sample_every == 0 {
        return param("valves, failure_cycle and sample_every must be >= 1");
    }
    let fleet = valves(seed, cfg.valves, cfg.jitter);
    let mut rows = Vec::new();
    for (v, params) in fleet.iter().enumerate() {
        rows.extend(rul_trajectory(cfg, params, seed, v as u32)?);
    }
    Ok(Dataset { rows })
}

/// Hyperparameters shared by both training entry points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub split: [f64; 3],
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 10,
            learning_rate: 1e-3,
            seed: 0,
            split: [0.7, 0.2, 0.1],
        }
    }
}

impl ModelTrainConfig {
    fn nn(&self, loss: Loss) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TrainConfig::new(loss)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalReport {
    Classification {
        accuracy: f64,
        /// Row `t` is the mean predicted distribution over samples of class `t`.
        confusion: [[f64; 4]; 4],
        support: [usize; 4],
    },
    Regression {
        mae_cycles: f64,
        n: usize,
    },
}

impl EvalReport {
    pub fn accuracy(&self) -> Option<f64> {
        match self {
            EvalReport::Classification { accuracy, .. } => Some(*accuracy),
            EvalReport::Regression { .. } => None,
        }
    }

    pub fn mae_cycles(&self) -> Option<f64> {
        match self {
            EvalReport::Regression { mae_cycles, .. } => Some(*mae_cycles),
            EvalReport::Classification { .. } => None,
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Anything that maps a feature vector to an output vector.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError>;
}

impl Predictor for Mlp {
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.infer(x)
    }
}

pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    test: &Dataset,
) -> Result<EvalReport, ModelError> {
    match test.kind()? {
        DatasetKind::Fault => {
            let mut sums = [[0.0; 4]; 4];
            let mut support = [0usize; 4];
            let mut correct = 0usize;
            for r in &test.rows {
                let Target::Class(label) = r.target else {
                    unreachable!("kind checked")
                };
                let p = model.predict(&r.features.to_array())?;
                if p.len() != 4 {
                    return Err(
                        NnError::Shape(format!("classifier returned {} outputs", p.len())).into(),
                    );
                }
                let t = label.index();
                support[t] += 1;
                for (s, v) in sums[t].iter_mut().zip(&p) {
                    *s += v;
                }
                if argmax(&p) == t {
                    correct += 1;
                }
            }
            for (row, &n) in sums.iter_mut().zip(&support) {
                if n > 0 {
                    row.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
            Ok(EvalReport::Classification {
                accuracy: correct as f64 / test.len() as f64,
                confusion: sums,
                support,
            })
        }
        DatasetKind::Rul => {
            let mut err = 0.0;
            for r in &test.rows {
                let Target::Rul(c) = r.target else {
                    unreachable!("kind checked")
                };
                let p = model.predict(&r.features.to_array())?;
                err += (p[0] - c as f64).abs();
            }
            Ok(EvalReport::Regression {
                mae_cycles: err / test.len() as f64,
                n: test.len(),
            })
        }
    }
}

fn expect_kind(ds: &Dataset, expected: DatasetKind) -> Result<(), ModelError> {
    let found = ds.kind()?;
    if found != expected {
        return Err(ModelError::KindMismatch { expected, found });
    }
    Ok(())
}

pub type Trained = (Mlp, TrainHistory, EvalReport);

pub fn train_fault(ds: &Dataset, cfg: &ModelTrainConfig) -> Result<Trained, ModelError> {
    expect_kind(ds, DatasetKind::Fault)?;
    let (train, val, test) = split_dataset(ds, cfg.split, cfg.seed)?;
    let mut model = build_fault_model(cfg.seed);
    let train_ex = train.examples();
    model.fit_input_scaler(&train_ex.iter().map(|e| e.x.clone()).collect::<Vec<_>>());
    let history = tinynn::train(
        &mut model,
        &train_ex,
        &val.examples(),
        &cfg.nn(Loss::CategoricalCrossEntropy),
    )?;
    let report = evaluate(&model, &test)?;
    Ok((model, history, report))
}

pub fn train_rul(ds: &Dataset, cfg: &ModelTrainConfig) -> Result<Trained, ModelError> {
    expect_kind(ds, DatasetKind::Rul)?;
    let (train, val, test) = split_dataset(ds, cfg.split, cfg.seed)?;
    let train_ex = train.examples();
    let val_ex = val.examples();
    let xs: Vec<Vec<f64>> = train_ex.iter().map(|e| e.x.clone()).collect();
    let scale = train_ex.iter().map(|e| e.y[0]).fold(1.0, f64::max);
    let mean_target = train_ex.iter().map(|e| e.y[0]).sum::<f64>() / train_ex.len() as f64;
    let mut attempt = 0;
    loop {
        let init_seed = if attempt == 0 {
            cfg.seed
        } else {
            mix_seed(cfg.seed, 0xDEAD, attempt as u64)
        };
        let mut model = build_rul_model(init_seed);
        model.fit_input_scaler(&xs);
        model.output_scaler = vec![Scaler {
            mean: 0.0,
            std: scale,
        }];
        // start the output at the average target so early updates do not
        // drive the narrow ReLU layers into the dead zone
        if let Some(last) = model.layers.last_mut() {
            last.biases[0] = (mean_target / scale) as f32 as f64;
        }
        let history = tinynn::train(
            &mut model,
            &train_ex,
            &val_ex,
            &cfg.nn(Loss::MeanAbsoluteError),
        )?;
        // a fully dead hidden layer means a constant predictor: re-initialise
        if model.dead_layer(&xs)?.is_some() && attempt < MAX_RETRIES {
            attempt += 1;
            continue;
        }
        let report = evaluate(&model, &test)?;
        return Ok((model, history, report));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_rows(counts: [usize; 4]) -> Dataset {
        let mut rows = Vec::new();
        for (l, &n) in FaultLabel::ALL.iter().zip(&counts) {
            for i in 0..n {
                rows.push(Row {
                    features: FeatureVector {
                        di_dt: i as f64,
                        auc: l.index() as f64,
                    },
                    target: Target::Class(*l),
                    provenance: Provenance::Imported { line: i as u64 },
                });
            }
        }
        Dataset { rows }
    }

    #[test]
    fn architectures_match_reference_parameter_counts() {
        let f = build_fault_model(0);
        assert_eq!(f.param_counts(), vec![108, 888, 300, 52]);
        assert_eq!(f.param_count(), 1348);
        assert_eq!(f.output_dim(), 4);
        let r = build_rul_model(0);
        assert_eq!(r.param_counts(), vec![192, 1040, 68, 5]);
        assert_eq!(r.param_count(), 1305);
        assert_eq!(r.output_dim(), 1);
        assert_eq!(build_fault_model(5), build_fault_model(5));
        assert_eq!(build_rul_model(5), build_rul_model(5));
        assert_ne!(build_rul_model(5), build_rul_model(6));
    }

    #[test]
    fn split_sizes_for_1400_rows() {
        let ds = class_rows([600, 200, 200, 400]);
        let (a, b, c) = split_dataset(&ds, [0.7, 0.2, 0.1], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (980, 280, 140));
        assert_eq!(a.class_counts(), [420, 140, 140, 280]);
        assert_eq!(c.class_counts(), [60, 20, 20, 40]);
    }

    #[test]
    fn degenerate_split_rejected() {
        let ds = class_rows([600, 200, 200, 400]);
        assert!(split_dataset(&ds, [1.0, 0.0, 0.0], 1).is_err());
        assert!(split_dataset(&ds, [0.5, 0.2, 0.2], 1).is_err());
        assert!(split_dataset(&class_rows([1, 0, 0, 0]), [0.7, 0.2, 0.1], 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = class_rows([37, 11, 5, 20]);
        let (a, b, c) = split_dataset(&ds, [0.7, 0.2, 0.1], 9).unwrap();
        let mut all: Vec<_> = a
            .rows
            .iter()
            .chain(&b.rows)
            .chain(&c.rows)
            .map(|r| (r.target, r.features.di_dt as i64))
            .collect();
        all.sort_by_key(|(t, i)| (format!("{t:?}"), *i));
        let mut orig: Vec<_> = ds
            .rows
            .iter()
            .map(|r| (r.target, r.features.di_dt as i64))
            .collect();
        orig.sort_by_key(|(t, i)| (format!("{t:?}"), *i));
        assert_eq!(all, orig);
        assert_eq!(split_dataset(&ds, [0.7, 0.2, 0.1], 9).unwrap().0, a);
    }

    struct Fixed(Vec<f64>);
    impl Predictor for Fixed {
        fn predict(&self, _: &[f64]) -> Result<Vec<f64>, NnError> {
            Ok(self.0.clone())
        }
    }

    struct Oracle;
    impl Predictor for Oracle {
        fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
            Ok(FaultLabel::from_index(x[1] as usize).unwrap().one_hot())
        }
    }

    #[test]
    fn evaluate_perfect_and_uniform() {
        let ds = class_rows([6, 2, 2, 4]);
        let EvalReport::Classification {
            accuracy,
            confusion,
            ..
        } = evaluate(&Oracle, &ds).unwrap()
        else {
            panic!()
        };
        assert_eq!(accuracy, 1.0);
        for (t, row) in confusion.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                assert_eq!(*v, if t == p { 1.0 } else { 0.0 });
            }
        }
        let EvalReport::Classification {
            accuracy,
            confusion,
            ..
        } = evaluate(&Fixed(vec![0.25; 4]), &ds).unwrap()
        else {
            panic!()
        };
        assert_eq!(accuracy, 6.0 / 14.0);
        for row in confusion {
            assert_eq!(row, [0.25; 4]);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(evaluate(&Oracle, &Dataset::default()).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = class_rows([2, 1, 0, 1]);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("di_dt,auc,target\n0,0,good\n"));
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.class_counts(), [2, 1, 0, 1]);

        let rul =
            Dataset::read_csv("di_dt,auc,target\n1.5,200,1500\n2,190,5\n".as_bytes()).unwrap();
        assert_eq!(rul.kind().unwrap(), DatasetKind::Rul);

        let mixed = Dataset::read_csv("di_dt,auc,target\n1,2,good\n1,2,5\n".as_bytes());
        assert!(matches!(mixed, Err(ModelError::Csv { line: 3, .. })));
        let junk = Dataset::read_csv("di_dt,auc,target\n1,2,broken\n".as_bytes());
        assert!(matches!(junk, Err(ModelError::Csv { line: 2, .. })));
    }

    #[test]
    fn fault_dataset_counts_and_determinism() {
        let cfg = FaultDatasetConfig {
            counts: [12, 5, 5, 8],
            ..Default::default()
        };
        let a = gen_fault_dataset(&cfg, 3).unwrap();
        assert_eq!(a.class_counts(), [12, 5, 5, 8]);
        assert_eq!(a, gen_fault_dataset(&cfg, 3).unwrap());
        let zero = FaultDatasetConfig {
            counts: [0; 4],
            ..Default::default()
        };
        assert!(gen_fault_dataset(&zero, 3).is_err());
    }

    #[test]
    fn rul_trajectory_labels() {
        let cfg = RulDatasetConfig {
            valves: 1,
            ..Default::default()
        };
        let ds = gen_rul_dataset(&cfg, 1).unwrap();
        assert_eq!(ds.len(), 300);
        let targets: Vec<u64> = ds
            .rows
            .iter()
            .map(|r| match r.target {
                Target::Rul(c) => c,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(targets[0], 1500);
        assert_eq!(*targets.last().unwrap(), 5);
        assert!(targets.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let ds = class_rows([3, 3, 3, 3]);
        assert!(matches!(
            train_rul(&ds, &ModelTrainConfig::default()),
            Err(ModelError::KindMismatch { .. })
        ));
    }
}
