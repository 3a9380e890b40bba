//! Sensor traces: the input substrate for throughput modeling and
//! indoors/outdoors detection.
//!
//! A trace is an ordered sequence of timestamped samples, each carrying the
//! serving network type, the received signal power, the localization
//! subsystem's confidence radius and a ground-truth coverage label. Traces
//! are parsed from CSV files or synthesized from configurable distributions
//! for controlled experiments.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sanity bounds for received power, in dBm.
pub const POWER_DBM_MIN: f64 = -140.0;
pub const POWER_DBM_MAX: f64 = -20.0;

/// Mandatory header of the trace CSV format.
pub const TRACE_CSV_HEADER: &str = "timestamp_s,network,power_dbm,confidence_radius_m,truth";

/// Coverage classes. The order is load-bearing: `Indoor < Outdoor`, and
/// classification ties break toward `Indoor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageState {
    Indoor,
    Outdoor,
}

impl CoverageState {
    pub const ALL: [CoverageState; 2] = [CoverageState::Indoor, CoverageState::Outdoor];
}

impl fmt::Display for CoverageState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoverageState::Indoor => write!(f, "indoor"),
            CoverageState::Outdoor => write!(f, "outdoor"),
        }
    }
}

impl FromStr for CoverageState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "indoor" => Ok(CoverageState::Indoor),
            "outdoor" => Ok(CoverageState::Outdoor),
            other => Err(format!("unknown coverage state {other:?}")),
        }
    }
}

/// Radio access technology of the serving cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkType {
    #[serde(rename = "2G")]
    G2,
    #[serde(rename = "3G")]
    G3,
    #[serde(rename = "4G")]
    G4,
}

impl NetworkType {
    pub const ALL: [NetworkType; 3] = [NetworkType::G2, NetworkType::G3, NetworkType::G4];
}

impl fmt::Display for NetworkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkType::G2 => write!(f, "2G"),
            NetworkType::G3 => write!(f, "3G"),
            NetworkType::G4 => write!(f, "4G"),
        }
    }
}

impl FromStr for NetworkType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2G" => Ok(NetworkType::G2),
            "3G" => Ok(NetworkType::G3),
            "4G" => Ok(NetworkType::G4),
            other => Err(format!("unknown network type {other:?}")),
        }
    }
}

/// One timestamped sensor reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    /// Seconds since trace start, strictly increasing within a trace.
    pub timestamp_s: f64,
    pub network: NetworkType,
    /// Received power in dBm over the RAT's measured bandwidth.
    pub power_dbm: f64,
    /// Position-uncertainty radius reported by the localization subsystem,
    /// in meters. Strictly positive.
    pub confidence_radius_m: f64,
    /// Ground-truth coverage label recorded alongside the measurement.
    pub truth: CoverageState,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("row {line}: malformed: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("row {line}: timestamp {timestamp} does not increase over previous {previous}")]
    NonMonotonicTimestamp {
        line: usize,
        timestamp: f64,
        previous: f64,
    },
    #[error("row {line}: {field} = {value} out of range ({requirement})")]
    OutOfRangeValue {
        line: usize,
        field: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("trace {id:?} contains no samples")]
    Empty { id: String },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// An ordered, validated sequence of [`TraceSample`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    id: String,
    samples: Vec<TraceSample>,
}

impl Trace {
    /// Validates the sample invariants (non-empty, strictly increasing
    /// timestamps, power and radius in range). The `line` reported in errors
    /// is the 1-based sample position.
    pub fn new(id: impl Into<String>, samples: Vec<TraceSample>) -> Result<Self, TraceError> {
        let id = id.into();
        if samples.is_empty() {
            return Err(TraceError::Empty { id });
        }
        let mut previous: Option<f64> = None;
        for (i, sample) in samples.iter().enumerate() {
            validate_sample(sample, i + 1, previous)?;
            previous = Some(sample.timestamp_s);
        }
        Ok(Trace { id, samples })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].timestamp_s
    }

    pub fn end_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].timestamp_s
    }

    /// The sample governing wall time `t` under the piecewise-constant
    /// interpretation: the last sample with `timestamp_s <= t`, or the first
    /// sample when `t` precedes the trace.
    pub fn sample_at(&self, t: f64) -> &TraceSample {
        let idx = self.samples.partition_point(|s| s.timestamp_s <= t);
        &self.samples[idx.saturating_sub(1)]
    }

    /// Writes the trace in the canonical CSV format (round-trips through
    /// [`parse_trace`] exactly).
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), TraceError> {
        writeln!(w, "{TRACE_CSV_HEADER}")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.timestamp_s, s.network, s.power_dbm, s.confidence_radius_m, s.truth
            )?;
        }
        Ok(())
    }
}

fn validate_sample(
    sample: &TraceSample,
    line: usize,
    previous: Option<f64>,
) -> Result<(), TraceError> {
    let t = sample.timestamp_s;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(TraceError::OutOfRangeValue {
            line,
            field: "timestamp_s",
            value: t,
            requirement: "finite and >= 0",
        });
    }
    if let Some(prev) = previous {
        if t <= prev {
            return Err(TraceError::NonMonotonicTimestamp {
                line,
                timestamp: t,
                previous: prev,
            });
        }
    }
    if !(sample.power_dbm >= POWER_DBM_MIN && sample.power_dbm <= POWER_DBM_MAX) {
        return Err(TraceError::OutOfRangeValue {
            line,
            field: "power_dbm",
            value: sample.power_dbm,
            requirement: "within [-140, -20] dBm",
        });
    }
    if !(sample.confidence_radius_m > 0.0 && sample.confidence_radius_m.is_finite()) {
        return Err(TraceError::OutOfRangeValue {
            line,
            field: "confidence_radius_m",
            value: sample.confidence_radius_m,
            requirement: "finite and > 0",
        });
    }
    Ok(())
}

/// Parses a trace from the CSV format. Aborts on the first malformed row,
/// reporting its 1-based line number (the header is line 1).
pub fn parse_trace(reader: impl BufRead, id: impl Into<String>) -> Result<Trace, TraceError> {
    let id = id.into();
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(TraceError::MalformedRow {
                line: 1,
                reason: "empty input, expected header".into(),
            })
        }
    };
    if header.trim_end() != TRACE_CSV_HEADER {
        return Err(TraceError::MalformedRow {
            line: 1,
            reason: format!("expected header {TRACE_CSV_HEADER:?}, got {header:?}"),
        });
    }

    let mut samples = Vec::new();
    let mut previous: Option<f64> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let row = line?;
        let row = row.trim_end();
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 5 {
            return Err(TraceError::MalformedRow {
                line: line_no,
                reason: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let timestamp_s = parse_field_f64(fields[0], "timestamp_s", line_no)?;
        let network =
            NetworkType::from_str(fields[1]).map_err(|reason| TraceError::MalformedRow {
                line: line_no,
                reason,
            })?;
        let power_dbm = parse_field_f64(fields[2], "power_dbm", line_no)?;
        let confidence_radius_m = parse_field_f64(fields[3], "confidence_radius_m", line_no)?;
        let truth =
            CoverageState::from_str(fields[4]).map_err(|reason| TraceError::MalformedRow {
                line: line_no,
                reason,
            })?;
        let sample = TraceSample {
            timestamp_s,
            network,
            power_dbm,
            confidence_radius_m,
            truth,
        };
        validate_sample(&sample, line_no, previous)?;
        previous = Some(timestamp_s);
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(TraceError::Empty { id });
    }
    Ok(Trace { id, samples })
}

fn parse_field_f64(field: &str, name: &'static str, line: usize) -> Result<f64, TraceError> {
    field.parse::<f64>().map_err(|_| TraceError::MalformedRow {
        line,
        reason: format!("cannot parse {name} from {field:?}"),
    })
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// A scalar sampling distribution for synthetic power or radius values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScalarModel {
    Normal {
        mean: f64,
        std_dev: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    /// Log-normal rounded to the nearest multiple of `step` (never below
    /// `step`), mimicking the level quantization of GPS chip sets.
    QuantizedLogNormal {
        mu: f64,
        sigma: f64,
        step: f64,
    },
    /// Discrete distribution over a fixed support.
    Discrete {
        levels: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl ScalarModel {
    fn validate(&self, context: &str) -> Result<(), TraceError> {
        let fail = |msg: String| Err(TraceError::InvalidSpec(format!("{context}: {msg}")));
        match self {
            ScalarModel::Normal { mean, std_dev } => {
                if !mean.is_finite() || !std_dev.is_finite() || *std_dev < 0.0 {
                    return fail(format!("normal(mean={mean}, std_dev={std_dev})"));
                }
            }
            ScalarModel::LogNormal { mu, sigma } | ScalarModel::QuantizedLogNormal { mu, sigma, .. } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                    return fail(format!("log-normal(mu={mu}, sigma={sigma})"));
                }
                if let ScalarModel::QuantizedLogNormal { step, .. } = self {
                    if !(*step > 0.0 && step.is_finite()) {
                        return fail(format!("quantization step {step} must be > 0"));
                    }
                }
            }
            ScalarModel::Discrete { levels, weights } => {
                if levels.is_empty() || levels.len() != weights.len() {
                    return fail("discrete levels/weights must be non-empty and equal-length".into());
                }
                if levels.iter().any(|l| !l.is_finite()) {
                    return fail("discrete levels must be finite".into());
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    return fail("discrete weights must be non-negative with positive sum".into());
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ScalarModel::Normal { mean, std_dev } => {
                rand_distr::Normal::new(*mean, *std_dev).unwrap().sample(rng)
            }
            ScalarModel::LogNormal { mu, sigma } => {
                rand_distr::LogNormal::new(*mu, *sigma).unwrap().sample(rng)
            }
            ScalarModel::QuantizedLogNormal { mu, sigma, step } => {
                let raw = rand_distr::LogNormal::new(*mu, *sigma).unwrap().sample(rng);
                ((raw / step).round() * step).max(*step)
            }
            ScalarModel::Discrete { levels, weights } => {
                let total: f64 = weights.iter().sum();
                let mut target = rng.random::<f64>() * total;
                for (level, w) in levels.iter().zip(weights) {
                    target -= w;
                    if target <= 0.0 {
                        return *level;
                    }
                }
                *levels.last().unwrap()
            }
        }
    }
}

/// Per-class sampling distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassModel {
    pub power: ScalarModel,
    pub radius: ScalarModel,
}

/// One stretch of the coverage timeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoveragePhase {
    pub state: CoverageState,
    pub duration_s: f64,
}

/// Recipe for a synthetic trace: a coverage timeline plus per-class power
/// and radius generators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub timeline: Vec<CoveragePhase>,
    /// Sampling period in seconds (default 1 s).
    #[serde(default = "default_period")]
    pub period_s: f64,
    pub network: NetworkType,
    pub indoor: ClassModel,
    pub outdoor: ClassModel,
}

fn default_period() -> f64 {
    1.0
}

impl SynthesisSpec {
    fn validate(&self) -> Result<(), TraceError> {
        if self.timeline.is_empty() {
            return Err(TraceError::InvalidSpec("timeline is empty".into()));
        }
        if self
            .timeline
            .iter()
            .any(|p| !(p.duration_s > 0.0 && p.duration_s.is_finite()))
        {
            return Err(TraceError::InvalidSpec(
                "timeline phases must have positive finite durations".into(),
            ));
        }
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return Err(TraceError::InvalidSpec(format!(
                "sample period {} must be > 0",
                self.period_s
            )));
        }
        self.indoor.power.validate("indoor power")?;
        self.indoor.radius.validate("indoor radius")?;
        self.outdoor.power.validate("outdoor power")?;
        self.outdoor.radius.validate("outdoor radius")?;
        Ok(())
    }

    fn state_at(&self, t: f64) -> CoverageState {
        let mut boundary = 0.0;
        for phase in &self.timeline {
            boundary += phase.duration_s;
            if t < boundary {
                return phase.state;
            }
        }
        self.timeline.last().unwrap().state
    }

    fn total_duration(&self) -> f64 {
        self.timeline.iter().map(|p| p.duration_s).sum()
    }
}

/// Generates a trace from `spec`. Pure function of `(spec, seed)`: the RNG
/// is a ChaCha8 stream seeded with `seed`, and every sample's truth label is
/// dictated by its timestamp's position in the timeline.
pub fn synthesize_trace(spec: &SynthesisSpec, seed: u64) -> Result<Trace, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.total_duration();
    let mut samples = Vec::new();
    let mut i = 0u64;
    loop {
        let t = i as f64 * spec.period_s;
        if t >= total - 1e-9 && i > 0 {
            break;
        }
        if t >= total {
            break;
        }
        let truth = spec.state_at(t);
        let class = match truth {
            CoverageState::Indoor => &spec.indoor,
            CoverageState::Outdoor => &spec.outdoor,
        };
        let power_dbm = class.power.sample(&mut rng).clamp(POWER_DBM_MIN, POWER_DBM_MAX);
        let confidence_radius_m = class.radius.sample(&mut rng).max(0.01);
        samples.push(TraceSample {
            timestamp_s: t,
            network: spec.network,
            power_dbm,
            confidence_radius_m,
            truth,
        });
        i += 1;
    }
    Trace::new(format!("synth-{seed}"), samples)
}
