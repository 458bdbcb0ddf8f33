//! A small dense feed-forward network engine.
//!
//! Parameters are held as `f64` for training and gradient checks, but every
//! model leaving [`Mlp::new`] or [`train`] has parameters that are exactly
//! representable as `f32`, which is what the model file stores. That keeps
//! `restore(save(m)) == m` bit-exact.

mod format;

pub use format::{restore, save, FormatError};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to predicted probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
}

fn shape<T>(msg: impl Into<String>) -> Result<T, NnError> {
    Err(NnError::Shape(msg.into()))
}

fn param<T>(msg: impl Into<String>) -> Result<T, NnError> {
    Err(NnError::Parameter(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu { alpha: f32 },
    Softmax,
}

impl Activation {
    /// Leaky ReLU with the default negative slope of 0.01.
    pub fn leaky() -> Self {
        Activation::LeakyRelu { alpha: 0.01 }
    }
}

pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn apply_activation(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Linear => z.to_vec(),
        Activation::Relu => z.iter().map(|&x| x.max(0.0)).collect(),
        Activation::LeakyRelu { alpha } => z.iter().map(|&x| leaky_relu(x, alpha as f64)).collect(),
        Activation::Softmax => softmax(z),
    }
}

/// Pull `d_out` (dL/da) back through the activation to dL/dz.
fn activation_backward(act: Activation, z: &[f64], a: &[f64], d_out: &[f64]) -> Vec<f64> {
    match act {
        Activation::Linear => d_out.to_vec(),
        Activation::Relu => z
            .iter()
            .zip(d_out)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::LeakyRelu { alpha } => z
            .iter()
            .zip(d_out)
            .map(|(&x, &g)| if x >= 0.0 { g } else { alpha as f64 * g })
            .collect(),
        Activation::Softmax => {
            let dot: f64 = a.iter().zip(d_out).map(|(p, g)| p * g).sum();
            a.iter().zip(d_out).map(|(p, g)| p * (g - dot)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    CategoricalCrossEntropy,
    MeanAbsoluteError,
}

fn check_pair(y_true: &[f64], y_pred: &[f64]) -> Result<(), NnError> {
    if y_true.len() != y_pred.len() {
        return shape(format!(
            "target has {} values, prediction {}",
            y_true.len(),
            y_pred.len()
        ));
    }
    if y_true.is_empty() {
        return param("empty target vector");
    }
    Ok(())
}

/// `-Σ y·ln(max(ŷ, 1e-12))` for one example.
pub fn cce_loss(y_true: &[f64], y_pred: &[f64]) -> Result<f64, NnError> {
    check_pair(y_true, y_pred)?;
    Ok(-y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| {
            if *y == 0.0 {
                0.0
            } else {
                y * p.max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>())
}

/// Mean absolute error over the components of one example.
pub fn mae_loss(y_true: &[f64], y_pred: &[f64]) -> Result<f64, NnError> {
    check_pair(y_true, y_pred)?;
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p).abs())
        .sum::<f64>()
        / y_true.len() as f64)
}

impl Loss {
    pub fn value(self, y_true: &[f64], y_pred: &[f64]) -> Result<f64, NnError> {
        match self {
            Loss::CategoricalCrossEntropy => cce_loss(y_true, y_pred),
            Loss::MeanAbsoluteError => mae_loss(y_true, y_pred),
        }
    }

    fn grad(self, y_true: &[f64], y_pred: &[f64]) -> Vec<f64> {
        match self {
            Loss::CategoricalCrossEntropy => y_true
                .iter()
                .zip(y_pred)
                .map(|(y, p)| if *p > PROB_FLOOR { -y / p } else { 0.0 })
                .collect(),
            Loss::MeanAbsoluteError => {
                let n = y_true.len() as f64;
                y_true
                    .iter()
                    .zip(y_pred)
                    .map(|(y, p)| {
                        let d = p - y;
                        if d > 0.0 {
                            1.0 / n
                        } else if d < 0.0 {
                            -1.0 / n
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// One affine layer; `weights` is `out_dim × in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.spec.in_dim;
        self.weights
            .chunks_exact(n_in)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub const IDENTITY: Scaler = Scaler {
        mean: 0.0,
        std: 1.0,
    };

    /// Population mean/std; a constant column gets unit std.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Scaler {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Scaler {
            mean,
            std: if std > 1e-12 && std.is_finite() {
                std
            } else {
                1.0
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub kind: ModelKind,
    pub layers: Vec<Dense>,
    /// One entry per input feature.
    pub input_scaler: Vec<Scaler>,
    /// Empty, or one entry per output: predictions are `ŷ·std + mean`.
    pub output_scaler: Vec<Scaler>,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, identity scalers.
    pub fn new(kind: ModelKind, specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let weights = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.random_range(-limit..limit) as f32 as f64)
                    .collect();
                Dense {
                    spec,
                    weights,
                    biases: vec![0.0; spec.out_dim],
                }
            })
            .collect();
        Ok(Self {
            kind,
            layers,
            input_scaler: vec![Scaler::IDENTITY; specs[0].in_dim],
            output_scaler: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.spec.param_count()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_counts().iter().sum()
    }

    /// Structural and numeric checks shared by construction and restore.
    pub fn validate(&self) -> Result<(), NnError> {
        validate_specs(&self.specs())?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.spec.in_dim * l.spec.out_dim || l.biases.len() != l.spec.out_dim
            {
                return shape(format!("layer {i} parameter block does not match its dims"));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return param(format!("layer {i} has non-finite parameters"));
            }
        }
        if self.input_scaler.len() != self.input_dim() {
            return shape("input scaler length differs from input dim");
        }
        if !self.output_scaler.is_empty() && self.output_scaler.len() != self.output_dim() {
            return shape("output scaler length differs from output dim");
        }
        for s in self.input_scaler.iter().chain(&self.output_scaler) {
            if !(s.mean.is_finite() && s.std.is_finite() && s.std > 0.0) {
                return param("scaler entries need finite mean and std > 0");
            }
        }
        Ok(())
    }

    pub fn fit_input_scaler(&mut self, xs: &[Vec<f64>]) {
        self.input_scaler = (0..self.input_dim())
            .map(|j| Scaler::fit(xs.iter().map(move |x| x[j])))
            .collect();
    }

    /// Round every parameter to the nearest `f32`.
    pub fn quantize_to_f32(&mut self) {
        for l in &mut self.layers {
            round_f32(&mut l.weights);
            round_f32(&mut l.biases);
        }
    }

    fn scale_input(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input_dim() {
            return shape(format!(
                "expected {} inputs, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return param("non-finite input");
        }
        Ok(x.iter()
            .zip(&self.input_scaler)
            .map(|(v, s)| (v - s.mean) / s.std)
            .collect())
    }

    fn scale_target(&self, y: &[f64]) -> Result<Vec<f64>, NnError> {
        if y.len() != self.output_dim() {
            return shape(format!(
                "expected {} targets, got {}",
                self.output_dim(),
                y.len()
            ));
        }
        if self.output_scaler.is_empty() {
            return Ok(y.to_vec());
        }
        Ok(y.iter()
            .zip(&self.output_scaler)
            .map(|(v, s)| (v - s.mean) / s.std)
            .collect())
    }

    /// Pre-activations and activations for every layer; `acts[0]` is the
    /// scaled input.
    fn forward_trace(&self, x_scaled: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x_scaled);
        for l in &self.layers {
            let z = l.affine(acts.last().expect("input present"));
            acts.push(apply_activation(l.spec.activation, &z));
            zs.push(z);
        }
        (zs, acts)
    }

    /// Network output before output de-scaling.
    fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut a = self.scale_input(x)?;
        for l in &self.layers {
            a = apply_activation(l.spec.activation, &l.affine(&a));
        }
        Ok(a)
    }

    /// Index of the first hidden layer whose units are all zero for every
    /// input in `xs`. Such a network can no longer learn.
    pub fn dead_layer(&self, xs: &[Vec<f64>]) -> Result<Option<usize>, NnError> {
        let hidden = self.layers.len().saturating_sub(1);
        let mut alive = vec![false; hidden];
        for x in xs {
            let (_, acts) = self.forward_trace(self.scale_input(x)?);
            for (flag, a) in alive.iter_mut().zip(&acts[1..=hidden]) {
                *flag |= a.iter().any(|&v| v != 0.0);
            }
        }
        Ok(alive.iter().position(|&a| !a))
    }

    /// Scaled input through every layer, then output de-scaling.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let out = self.forward_raw(x)?;
        if self.output_scaler.is_empty() {
            return Ok(out);
        }
        Ok(out
            .iter()
            .zip(&self.output_scaler)
            .map(|(v, s)| v * s.std + s.mean)
            .collect())
    }

    /// Mean loss over `batch`, measured in the scaled target space.
    pub fn batch_loss(&self, batch: &[Example], loss: Loss) -> Result<f64, NnError> {
        if batch.is_empty() {
            return param("empty batch");
        }
        let mut total = 0.0;
        for ex in batch {
            let out = self.forward_raw(&ex.x)?;
            total += loss.value(&self.scale_target(&ex.y)?, &out)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Visit every parameter in layer order: weights then biases.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), NnError> {
    if specs.is_empty() {
        return shape("network needs at least one layer");
    }
    if specs.len() > u8::MAX as usize {
        return shape("too many layers");
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return shape(format!("layer {i} has a zero dimension"));
        }
        if s.activation == Activation::Softmax && i + 1 != specs.len() {
            return shape("softmax is only allowed on the final layer");
        }
        if let Activation::LeakyRelu { alpha } = s.activation {
            if !alpha.is_finite() {
                return param("leaky relu alpha must be finite");
            }
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return shape(format!(
                "layer {} outputs {} but layer {i} takes {}",
                i - 1,
                specs[i - 1].out_dim,
                s.in_dim
            ));
        }
    }
    Ok(())
}

/// Raw (unscaled) input and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Example {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients aligned with [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub loss: f64,
}

impl Gradients {
    fn zeros(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
            loss: 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }
}

/// Reverse-mode gradients of the mean batch loss.
pub fn gradients(model: &Mlp, batch: &[Example], loss: Loss) -> Result<Gradients, NnError> {
    if batch.is_empty() {
        return param("empty batch");
    }
    let mut g = Gradients::zeros(model);
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let target = model.scale_target(&ex.y)?;
        let (zs, acts) = model.forward_trace(model.scale_input(&ex.x)?);
        let out = acts.last().expect("output present");
        g.loss += loss.value(&target, out)? * scale;
        let mut d_act = loss.grad(&target, out);
        for (li, layer) in model.layers.iter().enumerate().rev() {
            let dz = activation_backward(layer.spec.activation, &zs[li], &acts[li + 1], &d_act);
            let a_prev = &acts[li];
            let lg = &mut g.layers[li];
            let n_in = layer.spec.in_dim;
            for (r, &dzr) in dz.iter().enumerate() {
                lg.biases[r] += dzr * scale;
                let row = &mut lg.weights[r * n_in..(r + 1) * n_in];
                for (gw, &a) in row.iter_mut().zip(a_prev) {
                    *gw += dzr * a * scale;
                }
            }
            if li > 0 {
                let mut d_prev = vec![0.0; n_in];
                for (r, &dzr) in dz.iter().enumerate() {
                    let row = &layer.weights[r * n_in..(r + 1) * n_in];
                    for (dp, &w) in d_prev.iter_mut().zip(row) {
                        *dp += w * dzr;
                    }
                }
                d_act = d_prev;
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss: Loss,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(loss: Loss) -> Self {
        Self {
            epochs: 50,
            batch_size: 10,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-7,
            seed: 0,
            loss,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs < 1 {
            return param("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return param("batch_size must be >= 1");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return param("rho must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return param("learning_rate and epsilon must be > 0");
        }
        Ok(())
    }
}

/// One RMSProp update over aligned slices.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], v: &mut [f64], cfg: &TrainConfig) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), v.len());
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
        *s = cfg.rho * *s + (1.0 - cfg.rho) * g * g;
        *p -= cfg.learning_rate * g / (s.sqrt() + cfg.epsilon);
    }
}

/// Running squared-gradient averages, laid out like [`Gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    layers: Vec<LayerGrad>,
}

impl RmsPropState {
    pub fn new(model: &Mlp) -> Self {
        Self {
            layers: Gradients::zeros(model).layers,
        }
    }

    pub fn apply(&mut self, model: &mut Mlp, grads: &Gradients, cfg: &TrainConfig) {
        for ((layer, g), s) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.layers)
        {
            rmsprop_step(&mut layer.weights, &g.weights, &mut s.weights, cfg);
            rmsprop_step(&mut layer.biases, &g.biases, &mut s.biases, cfg);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn check_set(model: &Mlp, set: &[Example], name: &str) -> Result<(), NnError> {
    if set.is_empty() {
        return param(format!("{name} set is empty"));
    }
    for ex in set {
        if ex.x.len() != model.input_dim() || ex.y.len() != model.output_dim() {
            return shape(format!("{name} example dims do not match the model"));
        }
    }
    Ok(())
}

/// Mini-batch RMSProp. Parameters are rounded to `f32` when training ends.
pub fn train(
    model: &mut Mlp,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainHistory, NnError> {
    cfg.validate()?;
    check_set(model, train_set, "training")?;
    check_set(model, val_set, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut state = RmsPropState::new(model);
    let mut history = TrainHistory::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let g = gradients(model, &batch, cfg.loss)?;
            if !g.loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Diverged { epoch });
            }
            epoch_loss += g.loss * chunk.len() as f64;
            state.apply(model, &g, cfg);
        }
        let val = model.batch_loss(val_set, cfg.loss)?;
        if !val.is_finite() || model.params_mut().any(|p| !p.is_finite()) {
            return Err(NnError::Diverged { epoch });
        }
        history.train_loss.push(epoch_loss / train_set.len() as f64);
        history.val_loss.push(val);
    }
    model.quantize_to_f32();
    Ok(history)
}
