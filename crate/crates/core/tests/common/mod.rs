//! Shared helpers for the integration tests: a brute-force feature
//! extractor written directly from the algorithm description, a random
//! trace generator and a finite-difference gradient check.
#![allow(dead_code)]

use prema_core::features::ExtractionConfig;
use prema_core::tinynn::{
    gradients, softmax, Activation, Example, LayerSpec, Loss, Mlp, ModelKind,
};
use prema_core::waveform::{
    synth_actuation_train, ActuationSchedule, DegradationState, FaultCondition, SynthOptions,
    ValveParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every field of a feature set, as computed by the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeatures {
    pub zero_index: usize,
    pub ecv_lower_avg: f64,
    pub ecv_upper_avg: f64,
    pub delta_ecv: f64,
    pub ecv10: f64,
    pub ecv90: f64,
    pub tl: f64,
    pub tu: f64,
    pub di_dt: f64,
    pub auc: f64,
}

fn naive_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in xs {
        s += x;
    }
    s / xs.len() as f64
}

/// All trigger positions, before suppression: the window starting at `z`
/// has mean at or above the threshold and begins at an idle sample.
pub fn oracle_candidates(samples: &[f64], cfg: &ExtractionConfig) -> Vec<usize> {
    let w = cfg.window;
    if samples.len() <= w {
        return Vec::new();
    }
    (0..samples.len() - w)
        .filter(|&z| {
            naive_mean(&samples[z..z + w]) >= cfg.edge_threshold && samples[z] <= cfg.idle_max
        })
        .collect()
}

/// Suppress candidates that fall inside the hold-off after an earlier
/// firing, then drop edges without a full history and frame.
pub fn oracle_edges(samples: &[f64], cfg: &ExtractionConfig) -> Vec<usize> {
    let mut fired: Vec<usize> = Vec::new();
    for z in oracle_candidates(samples, cfg) {
        match fired.last() {
            Some(&last) if z < last + cfg.skip_after_event + 1 => {}
            _ => fired.push(z),
        }
    }
    fired
        .into_iter()
        .filter(|&z| z >= cfg.lower_window && z + cfg.frame <= samples.len())
        .collect()
}

/// `None` where the extractor must report an error.
pub fn oracle_features(
    samples: &[f64],
    z: usize,
    cfg: &ExtractionConfig,
) -> Option<OracleFeatures> {
    let lower = naive_mean(&samples[z - cfg.lower_window..z]);
    let upper = naive_mean(&samples[z + cfg.upper_window_start..z + cfg.upper_window_end]);
    let delta = upper - lower;
    if delta <= 0.0 {
        return None;
    }
    let ecv10 = 0.1 * delta + lower;
    let ecv90 = 0.9 * delta + lower;
    let end = z + cfg.frame;
    let above: Vec<usize> = (z..end).filter(|&j| samples[j] >= ecv10).collect();
    let j = *above.iter().min()?;
    let below: Vec<usize> = (j..end).filter(|&k| samples[k] <= ecv90).collect();
    let tu_idx = below.iter().max().map_or(j, |k| k + 1);
    let ms = 1000.0 / cfg.sample_rate;
    let tl = (j - z) as f64 * ms;
    let tu = (tu_idx - z) as f64 * ms;
    if tu <= tl {
        return None;
    }
    // trapezoid rule, one interval at a time
    let a = cfg.auc_window;
    let mut area = 0.0;
    for m in 0..a {
        area += (samples[z + m] + samples[z + m + 1]) / 2.0;
    }
    Some(OracleFeatures {
        zero_index: z,
        ecv_lower_avg: lower,
        ecv_upper_avg: upper,
        delta_ecv: delta,
        ecv10,
        ecv90,
        tl,
        tu,
        di_dt: (ecv90 - ecv10) / (tu - tl),
        auc: area / a as f64,
    })
}

/// A random multi-actuation trace in mA, with random faults, wear,
/// environment and noise.
pub fn random_trace(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = ValveParams::default();
    let params = ValveParams {
        rise_tau: rng.random_range(1.0..4.0),
        dip_time: rng.random_range(10.0..20.0),
        dip_depth: rng.random_range(20.0..80.0),
        dip_width: rng.random_range(2.0..4.0),
        idle_current: rng.random_range(0.0..3.0),
        temperature: rng.random_range(20.0..32.0),
        pressure: rng.random_range(1.0..2.0),
        ..base
    };
    let n = rng.random_range(1..=4);
    let cycles: Vec<(FaultCondition, DegradationState)> = (0..n)
        .map(|_| {
            let fault = match rng.random_range(0..4) {
                0 => FaultCondition::Good,
                1 => FaultCondition::SpoolStuck,
                2 => FaultCondition::SpringFailure,
                _ => FaultCondition::UnderVoltage {
                    applied_voltage: rng.random_range(8.0..20.0),
                },
            };
            let deg = DegradationState::new(rng.random_range(0..1500), 1500).unwrap();
            (fault, deg)
        })
        .collect();
    let schedule = ActuationSchedule {
        f_op: rng.random_range(1.0..3.0),
        ..ActuationSchedule::default()
    };
    let opts = SynthOptions {
        noise_std: rng.random_range(0.0..6.0),
        seed: rng.random(),
        ..SynthOptions::default()
    };
    synth_actuation_train(&params, &cycles, &schedule, &opts)
        .unwrap()
        .trace
        .samples
}

/// Central-difference step for the five-point stencil. Loss rounding
/// (about 1e-16 relative) over 12h stays far under the 1e-8 floor, and
/// the O(h^4) truncation error is negligible.
pub const FD_STEP: f64 = 3e-3;

/// Smallest step tried when the probe interval straddles a kink. Only
/// reachable with the double-double reference for MAE networks; for
/// cross-entropy networks zero-gradient parameters give exactly equal
/// losses, so small steps do not add noise there either.
pub const MIN_FD_STEP: f64 = 1e-9;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest relative disagreement, denominator `max(|a|, |b|, 1e-8)`.
    pub worst: f64,
    pub checked: usize,
    pub total: usize,
}

/// Which side of every kink the batch sits on: ReLU-family
/// pre-activations and, for MAE, the residual signs.
fn kink_pattern(model: &Mlp, batch: &[Example], loss: Loss) -> Vec<bool> {
    let mut pattern = Vec::new();
    for ex in batch {
        let mut a: Vec<f64> =
            ex.x.iter()
                .zip(&model.input_scaler)
                .map(|(v, s)| (v - s.mean) / s.std)
                .collect();
        for l in &model.layers {
            let z: Vec<f64> = l
                .weights
                .chunks(l.spec.in_dim)
                .zip(&l.biases)
                .map(|(row, b)| row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect();
            a = match l.spec.activation {
                Activation::Relu => {
                    pattern.extend(z.iter().map(|&v| v > 0.0));
                    z.iter().map(|&v| v.max(0.0)).collect()
                }
                Activation::LeakyRelu { alpha } => {
                    pattern.extend(z.iter().map(|&v| v > 0.0));
                    z.iter()
                        .map(|&v| if v > 0.0 { v } else { alpha as f64 * v })
                        .collect()
                }
                Activation::Softmax => softmax(&z),
                Activation::Linear => z,
            };
        }
        if loss == Loss::MeanAbsoluteError {
            for (i, (out, y)) in a.iter().zip(&ex.y).enumerate() {
                let target = model
                    .output_scaler
                    .get(i)
                    .map_or(*y, |s| (y - s.mean) / s.std);
                pattern.push(out > &target);
            }
        }
    }
    pattern
}

fn five_point(
    probe: &mut Mlp,
    idx: usize,
    batch: &[Example],
    loss: Loss,
    h: f64,
    base: &[bool],
) -> Option<f64> {
    let orig = *probe.params_mut().nth(idx).unwrap();
    let mut f = [0.0; 4];
    let mut smooth = true;
    for (slot, offset) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
        *probe.params_mut().nth(idx).unwrap() = orig + offset * h;
        *slot = probe.batch_loss(batch, loss).unwrap();
        smooth &= kink_pattern(probe, batch, loss) == base;
    }
    *probe.params_mut().nth(idx).unwrap() = orig;
    // differences first, so equal losses give exactly zero
    smooth.then(|| (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h))
}

/// Compare analytic gradients with the five-point central difference
/// `(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h`. When the probe interval
/// of a parameter crosses a kink the step is quartered until it does not;
/// a parameter that still crosses at `MIN_FD_STEP` is left unchecked.
pub fn gradient_check(model: &Mlp, batch: &[Example], loss: Loss, h: f64) -> GradCheck {
    let analytic: Vec<f64> = gradients(model, batch, loss).unwrap().iter().collect();
    assert_eq!(analytic.len(), model.param_count());
    let params: Vec<f64> = model.clone().params_mut().map(|p| *p).collect();
    let mut probe = model.clone();
    let base = kink_pattern(model, batch, loss);
    let dd_base = match loss {
        Loss::MeanAbsoluteError => dd_forward(model, &params, batch, 0, Dd::ZERO).1,
        Loss::CategoricalCrossEntropy => Vec::new(),
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (idx, &a) in analytic.iter().enumerate() {
        // near a kink, shrink the step until the probe stays on one side
        let mut step = h;
        while step >= MIN_FD_STEP {
            let fd = match loss {
                Loss::MeanAbsoluteError => {
                    dd_five_point(model, &params, idx, batch, step, &dd_base)
                }
                Loss::CategoricalCrossEntropy => {
                    five_point(&mut probe, idx, batch, loss, step, &base)
                }
            };
            if let Some(fd) = fd {
                checked += 1;
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
                break;
            }
            step /= 4.0;
        }
    }
    GradCheck {
        worst,
        checked,
        total: analytic.len(),
    }
}

/// Double-double number `hi + lo`, about 32 significant digits. Used as
/// the reference for MAE networks, whose loss is piecewise affine in each
/// parameter: an exactly cancelling gradient next to a kink needs a tiny
/// step, and at f64 precision the quotient would then be rounding noise.
#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd {
            hi: s,
            lo: (a - (s - bb)) + (b - bb),
        }
    }

    fn norm(hi: f64, lo: f64) -> Dd {
        let s = hi + lo;
        Dd {
            hi: s,
            lo: lo - (s - hi),
        }
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        Dd::norm(s.hi, s.lo + self.lo + o.lo)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p);
        Dd::norm(p, err + self.hi * o.lo + self.lo * o.hi)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn positive(self) -> bool {
        self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0)
    }

    fn abs(self) -> Dd {
        if self.positive() {
            self
        } else {
            self.neg()
        }
    }

    fn scale(self, k: f64) -> Dd {
        self.mul(Dd::from(k))
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// MAE batch loss with parameter `idx` moved by `delta`, plus the kink
/// pattern at that point. Softmax layers are not supported.
fn dd_forward(
    model: &Mlp,
    params: &[f64],
    batch: &[Example],
    idx: usize,
    delta: Dd,
) -> (Dd, Vec<bool>) {
    let param = |i: usize| {
        let p = Dd::from(params[i]);
        if i == idx {
            p.add(delta)
        } else {
            p
        }
    };
    let mut total = Dd::ZERO;
    let mut pattern = Vec::new();
    for ex in batch {
        let mut a: Vec<Dd> =
            ex.x.iter()
                .zip(&model.input_scaler)
                .map(|(v, s)| Dd::from((v - s.mean) / s.std))
                .collect();
        let mut offset = 0;
        for l in &model.layers {
            let (n_in, n_out) = (l.spec.in_dim, l.spec.out_dim);
            let z: Vec<Dd> = (0..n_out)
                .map(|o| {
                    (0..n_in).fold(param(offset + n_in * n_out + o), |acc, i| {
                        acc.add(param(offset + o * n_in + i).mul(a[i]))
                    })
                })
                .collect();
            offset += n_in * n_out + n_out;
            a = match l.spec.activation {
                Activation::Relu => {
                    pattern.extend(z.iter().map(|v| v.positive()));
                    z.iter()
                        .map(|&v| if v.positive() { v } else { Dd::ZERO })
                        .collect()
                }
                Activation::LeakyRelu { alpha } => {
                    pattern.extend(z.iter().map(|v| v.positive()));
                    z.iter()
                        .map(|&v| {
                            if v.positive() {
                                v
                            } else {
                                v.scale(alpha as f64)
                            }
                        })
                        .collect()
                }
                Activation::Linear => z,
                Activation::Softmax => panic!("double-double reference covers MAE networks only"),
            };
        }
        let mut err = Dd::ZERO;
        for (i, (out, y)) in a.iter().zip(&ex.y).enumerate() {
            let target = model
                .output_scaler
                .get(i)
                .map_or(*y, |s| (y - s.mean) / s.std);
            let r = out.add(Dd::from(target).neg());
            pattern.push(r.positive());
            err = err.add(r.abs());
        }
        total = total.add(err.scale(1.0 / a.len() as f64));
    }
    (total.scale(1.0 / batch.len() as f64), pattern)
}

fn dd_five_point(
    model: &Mlp,
    params: &[f64],
    idx: usize,
    batch: &[Example],
    h: f64,
    base: &[bool],
) -> Option<f64> {
    let mut f = [Dd::ZERO; 4];
    for (slot, offset) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
        let (loss, pattern) = dd_forward(model, params, batch, idx, Dd::from(offset * h));
        if pattern != base {
            return None;
        }
        *slot = loss;
    }
    let num = f[1]
        .add(f[2].neg())
        .scale(8.0)
        .add(f[0].add(f[3].neg()).neg());
    Some(num.value() / (12.0 * h))
}

/// Compare the production extractor with the oracle on one trace.
pub fn check_against_oracle(samples: &[f64], cfg: &ExtractionConfig) -> Result<usize, String> {
    use prema_core::features::{detect_rising_edges, extract_samples};
    let edges = detect_rising_edges(samples, cfg);
    let expected = oracle_edges(samples, cfg);
    if edges != expected {
        return Err(format!("edges {edges:?} != oracle {expected:?}"));
    }
    let got = extract_samples(samples, cfg);
    let want: Vec<OracleFeatures> = expected
        .iter()
        .filter_map(|&z| oracle_features(samples, z, cfg))
        .collect();
    if got.features.len() != want.len() {
        return Err(format!(
            "{} feature sets, oracle has {}",
            got.features.len(),
            want.len()
        ));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    for (g, w) in got.features.iter().zip(&want) {
        let pairs = [
            (g.ecv_lower_avg, w.ecv_lower_avg),
            (g.ecv_upper_avg, w.ecv_upper_avg),
            (g.delta_ecv, w.delta_ecv),
            (g.ecv10, w.ecv10),
            (g.ecv90, w.ecv90),
            (g.di_dt, w.di_dt),
            (g.auc, w.auc),
        ];
        if g.zero_index != w.zero_index
            || g.tl != w.tl
            || g.tu != w.tu
            || !pairs.iter().all(|&(a, b)| close(a, b))
        {
            return Err(format!(
                "features differ at {}: {g:?} vs {w:?}",
                w.zero_index
            ));
        }
    }
    Ok(expected.len())
}

/// A small random network with a batch that matches it.
pub fn random_problem(seed: u64) -> (Mlp, Vec<Example>, Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in = rng.random_range(1..4);
    let depth = rng.random_range(1..4);
    let classifier = rng.random_bool(0.5);
    let mut dims = vec![n_in];
    for _ in 0..depth - 1 {
        dims.push(rng.random_range(2..6));
    }
    let n_out = if classifier {
        rng.random_range(2..5)
    } else {
        1
    };
    dims.push(n_out);
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(i, d)| {
            let act = if i + 2 == dims.len() {
                if classifier {
                    Activation::Softmax
                } else {
                    Activation::Linear
                }
            } else {
                match rng.random_range(0..3) {
                    0 => Activation::Relu,
                    1 => Activation::leaky(),
                    _ => Activation::Linear,
                }
            };
            LayerSpec::new(d[0], d[1], act)
        })
        .collect();
    let kind = if classifier {
        ModelKind::Classifier
    } else {
        ModelKind::Regressor
    };
    let mut model = Mlp::new(kind, &specs, rng.random()).unwrap();
    for p in model.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let batch = (0..rng.random_range(1..6))
        .map(|_| {
            let x = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = if classifier {
                let mut y = vec![0.0; n_out];
                y[rng.random_range(0..n_out)] = 1.0;
                y
            } else {
                vec![rng.random_range(-3.0..3.0)]
            };
            Example::new(x, y)
        })
        .collect();
    let loss = if classifier {
        Loss::CategoricalCrossEntropy
    } else {
        Loss::MeanAbsoluteError
    };
    (model, batch, loss)
}
