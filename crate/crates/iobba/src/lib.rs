//! Trace-driven simulation of HTTP adaptive streaming under mobile coverage
//! transitions.
//!
//! The pipeline runs in five stages, one module each:
//!
//! 1. [`trace`] — parse recorded sensor traces (received power, confidence
//!    radius, coverage ground truth) or synthesize them from configurable
//!    distributions.
//! 2. [`radio`] — convert received power into cell and per-user throughput
//!    with a capped Shannon model and round-robin sharing.
//! 3. [`detector`] — fit class-conditional densities and classify
//!    indoors/outdoors by fusing both sensors (MAP with uniform priors).
//! 4. [`policy`] — buffer-based quality selection: a linear baseline map and
//!    the IOBBA variant (exponential indoor map, constant indoor reservoir,
//!    upgrade hysteresis).
//! 5. [`simulator`] + [`qoe`] — discrete-event playback simulation producing
//!    session logs, reduced to mean bitrate, re-buffering frequency and
//!    adaptation frequency with 95% confidence intervals.

pub mod detector;
pub mod policy;
pub mod qoe;
pub mod radio;
pub mod simulator;
pub mod trace;

pub use detector::{DetectorModel, FusionMode};
pub use policy::{Ladder, PolicyMode};
pub use qoe::QoeReport;
pub use radio::{NetworkTable, ThroughputSeries};
pub use simulator::{SessionConfig, SessionLog};
pub use trace::{CoverageState, NetworkType, Trace, TraceSample};
