//! Predictive maintenance for solenoid valves from their drive-current
//! transients.
//!
//! * [`waveform`]: transient synthesis and the shunt/ADC sensing chain
//! * [`acquisition`]: ping-pong double buffering and its timing algebra
//! * [`features`]: rising-edge detection and transient features
//! * [`tinynn`]: a small dense network engine with a binary model format
//! * [`models`]: the fault classifier, the RUL regressor and their datasets
//! * [`pipeline`]: the streaming monitor that ties them together

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod tinynn;
pub mod waveform;

pub use acquisition::{Clock, PingPongBuffer, TimingReport};
pub use features::{ExtractionConfig, FeatureVector, TransientFeatures};
pub use models::{Dataset, EvalReport, FaultLabel};
pub use pipeline::{MonitorConfig, MonitorEvent, MonitorRecord};
pub use tinynn::{Mlp, ModelKind};
pub use waveform::{AdcConfig, DegradationState, FaultCondition, TransientTrace, ValveParams};
