//! Rising-edge detection and transient feature extraction.
//!
//! Edges are found with a moving-average trigger: a window whose mean
//! reaches `edge_threshold` while its first sample is still idle marks the
//! actuation start (`zero_index`). Around each edge a frame is analysed for
//! the pre/post current levels, the 10 % / 90 % crossing times, the rise
//! slope and a normalised trapezoidal area over the first samples.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::TransientTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("edge at {zero_index} lacks the required history or lookahead")]
    OutOfBounds { zero_index: usize },
    #[error("no actuation: current never crosses the 10% level within the frame")]
    NoActuation,
    #[error("degenerate transient: Tu ({tu} ms) <= Tl ({tl} ms)")]
    Degenerate { tl: f64, tu: f64 },
    #[error("invalid extraction config: {0}")]
    Config(String),
}

/// Window lengths in samples; `sample_rate` converts sample counts to ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub window: usize,
    /// mA
    pub edge_threshold: f64,
    /// mA
    pub idle_max: f64,
    pub lower_window: usize,
    pub upper_window_start: usize,
    pub upper_window_end: usize,
    pub frame: usize,
    pub skip_after_event: usize,
    /// Samples covered by the area feature.
    pub auc_window: usize,
    /// Hz
    pub sample_rate: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            window: 5,
            edge_threshold: 40.0,
            idle_max: 5.0,
            lower_window: 50,
            upper_window_start: 30,
            upper_window_end: 50,
            frame: 100,
            skip_after_event: 30,
            auc_window: 30,
            sample_rate: 1000.0,
        }
    }
}

impl ExtractionConfig {
    /// Default windows rescaled from 1 kHz to `fs`.
    pub fn for_sample_rate(fs: f64) -> Self {
        let d = Self::default();
        let scale = |n: usize| ((n as f64 * fs / 1000.0).round() as usize).max(1);
        Self {
            window: scale(d.window),
            lower_window: scale(d.lower_window),
            upper_window_start: scale(d.upper_window_start),
            upper_window_end: scale(d.upper_window_end),
            frame: scale(d.frame),
            skip_after_event: scale(d.skip_after_event),
            auc_window: scale(d.auc_window),
            sample_rate: fs,
            ..d
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::Config(m.into()));
        if self.window < 1 || self.lower_window < 1 || self.auc_window < 1 {
            return bad("window, lower_window and auc_window must be >= 1");
        }
        if self.upper_window_end <= self.upper_window_start {
            return bad("upper_window_end must exceed upper_window_start");
        }
        if self.frame < self.upper_window_end || self.frame <= self.auc_window {
            return bad("frame must cover the upper window and the area window");
        }
        if !(self.sample_rate > 0.0) {
            return bad("sample_rate must be > 0");
        }
        Ok(())
    }

    fn ms_per_sample(&self) -> f64 {
        1000.0 / self.sample_rate
    }

    /// Samples that must precede and follow a zero index for extraction.
    pub fn span(&self) -> usize {
        self.lower_window + self.frame
    }
}

/// All intermediates of one extraction. Times are ms after `zero_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientFeatures {
    pub zero_index: usize,
    pub ecv_lower_avg: f64,
    pub ecv_upper_avg: f64,
    pub delta_ecv: f64,
    pub ecv10: f64,
    pub ecv90: f64,
    pub tl: f64,
    pub tu: f64,
    /// mA/ms
    pub di_dt: f64,
    /// mA
    pub auc: f64,
}

impl TransientFeatures {
    pub fn vector(&self) -> FeatureVector {
        FeatureVector {
            di_dt: self.di_dt,
            auc: self.auc,
        }
    }
}

/// The model input pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub di_dt: f64,
    pub auc: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; 2] {
        [self.di_dt, self.auc]
    }
}

/// Why a detected edge was kept or dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    Accepted,
    /// Fewer than `lower_window` samples before the edge.
    NoHistory,
    /// Fewer than `frame` samples after the edge.
    NoLookahead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeCandidate {
    pub zero_index: usize,
    pub status: EdgeStatus,
}

/// Every trigger firing, including ones too close to the buffer ends.
pub fn scan_edges(samples: &[f64], cfg: &ExtractionConfig) -> Vec<EdgeCandidate> {
    let w = cfg.window;
    let mut out = Vec::new();
    if w == 0 || samples.len() <= w {
        return out;
    }
    let wf = w as f64;
    let mut sum: f64 = samples[..w].iter().sum();
    let mut i = w;
    while i < samples.len() {
        let z = i - w;
        if sum / wf >= cfg.edge_threshold && samples[z] <= cfg.idle_max {
            let status = if z < cfg.lower_window {
                EdgeStatus::NoHistory
            } else if z + cfg.frame > samples.len() {
                EdgeStatus::NoLookahead
            } else {
                EdgeStatus::Accepted
            };
            out.push(EdgeCandidate {
                zero_index: z,
                status,
            });
            i += cfg.skip_after_event + 1;
            if i < samples.len() {
                sum = samples[i - w..i].iter().sum();
            }
            continue;
        }
        sum += samples[i] - samples[z];
        i += 1;
    }
    out
}

/// Zero indices of edges with a full analysis frame around them.
pub fn detect_rising_edges(samples: &[f64], cfg: &ExtractionConfig) -> Vec<usize> {
    scan_edges(samples, cfg)
        .into_iter()
        .filter(|e| e.status == EdgeStatus::Accepted)
        .map(|e| e.zero_index)
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn extract_features(
    samples: &[f64],
    zero_index: usize,
    cfg: &ExtractionConfig,
) -> Result<TransientFeatures, FeatureError> {
    cfg.validate()?;
    let z = zero_index;
    if z < cfg.lower_window || z + cfg.frame > samples.len() {
        return Err(FeatureError::OutOfBounds { zero_index: z });
    }
    let ecv_lower_avg = mean(&samples[z - cfg.lower_window..z]);
    let ecv_upper_avg = mean(&samples[z + cfg.upper_window_start..z + cfg.upper_window_end]);
    let delta_ecv = ecv_upper_avg - ecv_lower_avg;
    if !(delta_ecv > 0.0) {
        return Err(FeatureError::NoActuation);
    }
    let ecv10 = delta_ecv * 0.1 + ecv_lower_avg;
    let ecv90 = delta_ecv * 0.9 + ecv_lower_avg;
    let end = z + cfg.frame;

    let j = (z..end)
        .find(|&j| samples[j] >= ecv10)
        .ok_or(FeatureError::NoActuation)?;
    // latest sample still at or below the 90% level; Tu is the sample after it
    let tu_idx = (j..end)
        .rev()
        .find(|&k| samples[k] <= ecv90)
        .map_or(j, |k| k + 1);

    let ms = cfg.ms_per_sample();
    let tl = (j - z) as f64 * ms;
    let tu = (tu_idx - z) as f64 * ms;
    if tu <= tl {
        return Err(FeatureError::Degenerate { tl, tu });
    }
    let di_dt = (ecv90 - ecv10) / (tu - tl);

    let a = cfg.auc_window;
    let inner: f64 = samples[z + 1..z + a].iter().sum();
    let auc = ((samples[z] + samples[z + a]) / 2.0 + inner) / a as f64;

    Ok(TransientFeatures {
        zero_index: z,
        ecv_lower_avg,
        ecv_upper_avg,
        delta_ecv,
        ecv10,
        ecv90,
        tl,
        tu,
        di_dt,
        auc,
    })
}

/// A detected edge that did not produce features.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDiagnostic {
    pub zero_index: usize,
    pub error: FeatureError,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Extraction {
    pub features: Vec<TransientFeatures>,
    pub diagnostics: Vec<EdgeDiagnostic>,
}

/// Detect and extract every actuation in `samples`. Extraction failures
/// and edges clipped by the buffer ends are reported per edge.
pub fn extract_samples(samples: &[f64], cfg: &ExtractionConfig) -> Extraction {
    let mut out = Extraction::default();
    for edge in scan_edges(samples, cfg) {
        let z = edge.zero_index;
        if edge.status != EdgeStatus::Accepted {
            out.diagnostics.push(EdgeDiagnostic {
                zero_index: z,
                error: FeatureError::OutOfBounds { zero_index: z },
            });
            continue;
        }
        match extract_features(samples, z, cfg) {
            Ok(f) => out.features.push(f),
            Err(error) => out.diagnostics.push(EdgeDiagnostic {
                zero_index: z,
                error,
            }),
        }
    }
    out
}

pub fn extract_all(trace: &TransientTrace, cfg: &ExtractionConfig) -> Extraction {
    extract_samples(&trace.samples, cfg)
}

/// Writes the feature CSV; `full` appends every intermediate column.
pub fn write_features_csv<W: Write>(
    out: W,
    features: &[TransientFeatures],
    full: bool,
) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["zero_index", "di_dt", "auc"];
    if full {
        header.extend([
            "ecv_lower_avg",
            "ecv_upper_avg",
            "delta_ecv",
            "ecv10",
            "ecv90",
            "tl",
            "tu",
        ]);
    }
    w.write_record(&header)?;
    for f in features {
        let mut row = vec![
            f.zero_index.to_string(),
            f.di_dt.to_string(),
            f.auc.to_string(),
        ];
        if full {
            row.extend(
                [
                    f.ecv_lower_avg,
                    f.ecv_upper_avg,
                    f.delta_ecv,
                    f.ecv10,
                    f.ecv90,
                    f.tl,
                    f.tu,
                ]
                .iter()
                .map(|v| v.to_string()),
            );
        }
        w.write_record(&row)?;
    }
    w.flush()
}
