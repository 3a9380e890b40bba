//! Discrete-event playback simulation.
//!
//! A session downloads segments one at a time, choosing each segment's
//! quality from the policy at request time. Download times invert the
//! piecewise-constant throughput integral exactly; the buffer gains one
//! segment duration per completed download and drains at 1 s/s while
//! playing. Playback begins once the buffer first reaches the startup
//! threshold and halts when it empties; the initial buffering period is
//! logged as a stall starting at t = 0 so that a session that never starts
//! carries exactly one open stall. When the buffer would exceed its capacity
//! after a completed segment, the client idles before the next request.

use std::io;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{map_classify, DetectorModel};
use crate::policy::{
    build_exponential_map, build_linear_map, next_quality, outdoor_r_lower, Ladder, MapShape,
    PolicyError, PolicyMaps, PolicyMode, PolicyState, DEFAULT_UPGRADE_PERSISTENCE,
    INDOOR_RESERVOIR_FRACTION, UPPER_THRESHOLD_FRACTION,
};
use crate::radio::{throughput_series, NetworkTable, RadioError, ThroughputSeries};
use crate::trace::{CoverageState, Trace};

/// Two reference segments of startup buffer.
pub const DEFAULT_STARTUP_THRESHOLD_S: f64 = 8.0;
/// Nominal duration of the reference content (9:56).
pub const DEFAULT_VIDEO_DURATION_S: f64 = 596.0;
/// Wall-clock cap as a multiple of the video duration, terminating
/// pathological sessions (e.g. zero throughput).
pub const DEFAULT_WALL_CAP_FACTOR: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid config: {field}: {reason}")]
    ConfigInvalid { field: &'static str, reason: String },
    #[error("policy mode requires a detection source")]
    MissingDetection,
    #[error(transparent)]
    Radio(#[from] RadioError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// How the outdoor map's reservoir is chosen at each request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutdoorReservoir {
    /// Download time of one maximum-quality segment at the most recent
    /// throughput estimate, clamped to [0.1, 0.3] of the maximum buffer.
    Dynamic,
    /// Fixed fraction of the maximum buffer.
    Fixed(f64),
}

/// Experiment-level policy variants: the baseline, IOBBA on ground-truth
/// labels, and IOBBA on detector output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Baseline,
    IobbaTrue,
    IobbaDetected,
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::Baseline => "baseline",
            PolicyKind::IobbaTrue => "iobba-true",
            PolicyKind::IobbaDetected => "iobba-detected",
        }
    }

    pub fn mode(&self) -> PolicyMode {
        match self {
            PolicyKind::Baseline => PolicyMode::Baseline,
            PolicyKind::IobbaTrue | PolicyKind::IobbaDetected => PolicyMode::Iobba,
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(PolicyKind::Baseline),
            "iobba-true" => Ok(PolicyKind::IobbaTrue),
            "iobba-detected" => Ok(PolicyKind::IobbaDetected),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

/// Where per-request coverage detections come from.
#[derive(Debug, Clone, Copy)]
pub enum DetectionSource<'a> {
    /// No detection (baseline sessions).
    None,
    /// The trace's ground-truth labels.
    GroundTruth(&'a Trace),
    /// MAP classification of the trace sample at the request time.
    Estimated {
        model: &'a DetectorModel,
        trace: &'a Trace,
    },
}

/// Per-session configuration.
#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub b_max_s: f64,
    pub startup_threshold_s: f64,
    pub k_users: u32,
    pub video_duration_s: f64,
    pub ladder: Ladder,
    pub policy: PolicyMode,
    /// The m-rule: consecutive upgrade indications required indoors.
    pub upgrade_persistence: u32,
    pub indoor_map_shape: MapShape,
    pub indoor_reservoir_fraction: f64,
    pub upper_threshold_fraction: f64,
    pub outdoor_reservoir: OutdoorReservoir,
    pub wall_cap_factor: f64,
}

impl SessionConfig {
    pub fn new(b_max_s: f64, k_users: u32, ladder: Ladder, policy: PolicyMode) -> Self {
        SessionConfig {
            b_max_s,
            startup_threshold_s: DEFAULT_STARTUP_THRESHOLD_S,
            k_users,
            video_duration_s: DEFAULT_VIDEO_DURATION_S,
            ladder,
            policy,
            upgrade_persistence: DEFAULT_UPGRADE_PERSISTENCE,
            indoor_map_shape: MapShape::Exponential,
            indoor_reservoir_fraction: INDOOR_RESERVOIR_FRACTION,
            upper_threshold_fraction: UPPER_THRESHOLD_FRACTION,
            outdoor_reservoir: OutdoorReservoir::Dynamic,
            wall_cap_factor: DEFAULT_WALL_CAP_FACTOR,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let fail = |field: &'static str, reason: String| {
            Err(SimulationError::ConfigInvalid { field, reason })
        };
        let seg = self.ladder.segment_duration_s();
        if !(self.b_max_s > 0.0 && self.b_max_s.is_finite()) {
            return fail("b_max_s", format!("{} must be > 0", self.b_max_s));
        }
        if !(self.startup_threshold_s > 0.0 && self.startup_threshold_s <= self.b_max_s) {
            return fail(
                "startup_threshold_s",
                format!(
                    "{} must lie in (0, b_max = {}]",
                    self.startup_threshold_s, self.b_max_s
                ),
            );
        }
        if self.startup_threshold_s > self.b_max_s - seg {
            // the idle rule drains to b_max - segment_duration; a startup
            // threshold above that level could never be reached again
            return fail(
                "startup_threshold_s",
                format!(
                    "{} must not exceed b_max - segment_duration = {}",
                    self.startup_threshold_s,
                    self.b_max_s - seg
                ),
            );
        }
        if self.k_users < 1 || self.k_users > crate::radio::MAX_USERS_PER_CHANNEL {
            return fail("k_users", format!("{} outside 1..=8", self.k_users));
        }
        let segments = self.video_duration_s / seg;
        if !(segments.is_finite() && segments >= 1.0 && (segments - segments.round()).abs() < 1e-9)
        {
            return fail(
                "video_duration_s",
                format!(
                    "{} must be a positive multiple of the segment duration {seg}",
                    self.video_duration_s
                ),
            );
        }
        if self.upgrade_persistence < 1 {
            return fail("upgrade_persistence", "must be at least 1".into());
        }
        if !(self.indoor_reservoir_fraction > 0.0
            && self.indoor_reservoir_fraction < self.upper_threshold_fraction
            && self.upper_threshold_fraction <= 1.0)
        {
            return fail(
                "thresholds",
                format!(
                    "need 0 < indoor reservoir ({}) < upper threshold ({}) <= 1",
                    self.indoor_reservoir_fraction, self.upper_threshold_fraction
                ),
            );
        }
        if let OutdoorReservoir::Fixed(frac) = self.outdoor_reservoir {
            if !(frac > 0.0 && frac < self.upper_threshold_fraction) {
                return fail(
                    "outdoor_reservoir",
                    format!("fixed fraction {frac} must lie in (0, upper threshold)"),
                );
            }
        }
        if !(self.wall_cap_factor >= 1.0) {
            return fail("wall_cap_factor", "must be at least 1".into());
        }
        Ok(())
    }

    fn segment_count(&self) -> u32 {
        (self.video_duration_s / self.ladder.segment_duration_s()).round() as u32
    }
}

/// Identifies one simulated session for reporting and aggregation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionTag {
    pub trace_id: String,
    pub policy: String,
    pub k_users: u32,
    pub b_max_s: f64,
}

impl SessionTag {
    pub fn order(&self, other: &SessionTag) -> std::cmp::Ordering {
        self.trace_id
            .cmp(&other.trace_id)
            .then_with(|| self.policy.cmp(&other.policy))
            .then_with(|| self.k_users.cmp(&other.k_users))
            .then_with(|| self.b_max_s.total_cmp(&other.b_max_s))
    }
}

/// One entry of the session event record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SessionEvent {
    SegmentRequested {
        wall_s: f64,
        index: u32,
        quality: usize,
    },
    SegmentCompleted {
        wall_s: f64,
        bits: f64,
        download_s: f64,
    },
    StallStarted {
        wall_s: f64,
    },
    StallEnded {
        wall_s: f64,
    },
    QualityChanged {
        wall_s: f64,
        from: usize,
        to: usize,
    },
    SessionEnded {
        wall_s: f64,
    },
}

impl SessionEvent {
    pub fn wall_s(&self) -> f64 {
        match *self {
            SessionEvent::SegmentRequested { wall_s, .. }
            | SessionEvent::SegmentCompleted { wall_s, .. }
            | SessionEvent::StallStarted { wall_s }
            | SessionEvent::StallEnded { wall_s }
            | SessionEvent::QualityChanged { wall_s, .. }
            | SessionEvent::SessionEnded { wall_s } => wall_s,
        }
    }
}

/// Complete record of one playback session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub tag: SessionTag,
    pub ladder: Ladder,
    pub b_max_s: f64,
    pub startup_threshold_s: f64,
    pub video_duration_s: f64,
    pub upgrade_persistence: u32,
    pub events: Vec<SessionEvent>,
    /// Buffer occupancy samples at event instants.
    pub buffer_trajectory: Vec<(f64, f64)>,
    /// Wall time at which playback first started, if it ever did.
    pub playback_start_s: Option<f64>,
    /// True when the session hit the wall-time cap before completing.
    pub capped: bool,
    /// True when the session ran past the end of its trace or throughput
    /// series (the last rate/sample was held).
    pub trace_exhausted: bool,
}

impl SessionLog {
    /// Requested quality per segment, in request order.
    pub fn qualities(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::SegmentRequested { quality, .. } => Some(*quality),
                _ => None,
            })
            .collect()
    }

    pub fn segments_completed(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, SessionEvent::SegmentCompleted { .. }))
            .count()
    }

    pub fn quality_change_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, SessionEvent::QualityChanged { .. }))
            .count()
    }

    /// Stalls that interrupt playback (the initial buffering stall at t = 0
    /// is excluded).
    pub fn rebuffering_count(&self) -> usize {
        let start = match self.playback_start_s {
            Some(t) => t,
            None => return 0,
        };
        self.events
            .iter()
            .filter(|e| matches!(e, SessionEvent::StallStarted { wall_s } if *wall_s > start))
            .count()
    }

    /// Total stalled wall time, including initial buffering; an open stall
    /// counts until session end.
    pub fn total_stall_time_s(&self) -> f64 {
        let mut total = 0.0;
        let mut open: Option<f64> = None;
        let mut end = 0.0;
        for e in &self.events {
            end = e.wall_s();
            match e {
                SessionEvent::StallStarted { wall_s } => open = Some(*wall_s),
                SessionEvent::StallEnded { wall_s } => {
                    if let Some(s) = open.take() {
                        total += wall_s - s;
                    }
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            total += end - s;
        }
        total
    }

    pub fn end_time_s(&self) -> f64 {
        self.events.last().map(SessionEvent::wall_s).unwrap_or(0.0)
    }
}

struct Playback {
    t: f64,
    buffer: f64,
    playing: bool,
    stalled: bool,
    events: Vec<SessionEvent>,
    trajectory: Vec<(f64, f64)>,
    playback_start: Option<f64>,
}

impl Playback {
    fn new() -> Self {
        Playback {
            t: 0.0,
            buffer: 0.0,
            playing: false,
            stalled: true,
            events: vec![SessionEvent::StallStarted { wall_s: 0.0 }],
            trajectory: vec![(0.0, 0.0)],
            playback_start: None,
        }
    }

    /// Advances wall time by `dt`, draining the buffer while playing and
    /// opening a stall if it empties before `dt` elapses.
    fn advance(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        if self.playing {
            if self.buffer >= dt {
                self.buffer -= dt;
                self.t += dt;
            } else {
                let played = self.buffer;
                self.t += played;
                self.buffer = 0.0;
                self.playing = false;
                self.stalled = true;
                self.events.push(SessionEvent::StallStarted { wall_s: self.t });
                self.trajectory.push((self.t, 0.0));
                self.t += dt - played;
            }
        } else {
            self.t += dt;
        }
    }

    fn maybe_start_playback(&mut self, startup_threshold: f64) {
        if !self.playing && self.buffer >= startup_threshold - 1e-12 {
            if self.stalled {
                self.events.push(SessionEvent::StallEnded { wall_s: self.t });
                self.stalled = false;
            }
            if self.playback_start.is_none() {
                self.playback_start = Some(self.t);
            }
            self.playing = true;
        }
    }
}

/// Runs one playback session over `series`, drawing coverage detections from
/// `detection` at each request instant.
pub fn simulate_session(
    series: &ThroughputSeries,
    detection: &DetectionSource<'_>,
    config: &SessionConfig,
    tag: SessionTag,
) -> Result<SessionLog, SimulationError> {
    config.validate()?;
    if config.policy == PolicyMode::Iobba && matches!(detection, DetectionSource::None) {
        return Err(SimulationError::MissingDetection);
    }

    let ladder = &config.ladder;
    let seg = ladder.segment_duration_s();
    let b_max = config.b_max_s;
    let headroom = b_max - seg;
    let n_segments = config.segment_count();
    let wall_cap = config.wall_cap_factor * config.video_duration_s;
    let r_upper = config.upper_threshold_fraction * b_max;
    let indoor_r_lower = config.indoor_reservoir_fraction * b_max;
    let indoor_map = match config.indoor_map_shape {
        MapShape::Exponential => build_exponential_map(ladder, indoor_r_lower, r_upper, b_max)?,
        MapShape::Linear => build_linear_map(ladder, indoor_r_lower, r_upper, b_max)?,
    };

    let mut pb = Playback::new();
    let mut policy_state = PolicyState::new(config.policy, config.upgrade_persistence);
    let mut recent_throughput = series.rate_at(0.0);
    let mut prev_quality: Option<usize> = None;
    let mut capped = false;
    let mut trace_exhausted = false;

    let detect_at = |t: f64, exhausted: &mut bool| -> CoverageState {
        match detection {
            DetectionSource::None => CoverageState::Outdoor,
            DetectionSource::GroundTruth(trace) => {
                if t > trace.end_time() {
                    *exhausted = true;
                }
                trace.sample_at(t).truth
            }
            DetectionSource::Estimated { model, trace } => {
                if t > trace.end_time() {
                    *exhausted = true;
                }
                let s = trace.sample_at(t);
                map_classify(model, s.power_dbm, s.confidence_radius_m).0
            }
        }
    };

    for j in 1..=n_segments {
        if pb.buffer > headroom + 1e-12 {
            // idle until one segment of headroom opens up
            debug_assert!(pb.playing, "idle wait requires active playback");
            let wait = pb.buffer - headroom;
            pb.advance(wait);
            pb.buffer = headroom;
            pb.trajectory.push((pb.t, pb.buffer));
        }
        if pb.t >= wall_cap {
            capped = true;
            break;
        }

        let detected = detect_at(pb.t, &mut trace_exhausted);
        let outdoor_lower = match config.outdoor_reservoir {
            OutdoorReservoir::Dynamic => outdoor_r_lower(ladder, recent_throughput, b_max),
            OutdoorReservoir::Fixed(frac) => frac * b_max,
        };
        let maps = PolicyMaps {
            indoor: indoor_map,
            outdoor: build_linear_map(ladder, outdoor_lower, r_upper, b_max)?,
        };
        let (quality, next_state) = next_quality(&policy_state, pb.buffer, detected, &maps, ladder);
        policy_state = next_state;
        if let Some(previous) = prev_quality {
            if quality != previous {
                pb.events.push(SessionEvent::QualityChanged {
                    wall_s: pb.t,
                    from: previous,
                    to: quality,
                });
            }
        }
        prev_quality = Some(quality);
        pb.events.push(SessionEvent::SegmentRequested {
            wall_s: pb.t,
            index: j,
            quality,
        });

        let bits = ladder.segment_bits(quality);
        let download_s = series.time_to_transfer(pb.t, bits);
        if !download_s.is_finite() || pb.t + download_s > wall_cap {
            pb.advance(wall_cap - pb.t);
            capped = true;
            break;
        }
        pb.advance(download_s);
        pb.buffer += seg;
        pb.events.push(SessionEvent::SegmentCompleted {
            wall_s: pb.t,
            bits,
            download_s,
        });
        if pb.t > series.end_time() {
            trace_exhausted = true;
        }
        recent_throughput = bits / download_s;
        pb.maybe_start_playback(config.startup_threshold_s);
        pb.trajectory.push((pb.t, pb.buffer));
    }

    if !capped {
        // all segments downloaded: play out the remaining buffer; reaching
        // zero here is the end of the video, not a stall
        if !pb.playing {
            if pb.stalled {
                pb.events.push(SessionEvent::StallEnded { wall_s: pb.t });
                pb.stalled = false;
            }
            if pb.playback_start.is_none() {
                pb.playback_start = Some(pb.t);
            }
            pb.playing = true;
        }
        pb.t += pb.buffer;
        pb.buffer = 0.0;
        pb.trajectory.push((pb.t, 0.0));
    }
    pb.events.push(SessionEvent::SessionEnded { wall_s: pb.t });

    Ok(SessionLog {
        tag,
        ladder: config.ladder.clone(),
        b_max_s: config.b_max_s,
        startup_threshold_s: config.startup_threshold_s,
        video_duration_s: config.video_duration_s,
        upgrade_persistence: config.upgrade_persistence,
        events: pb.events,
        buffer_trajectory: pb.trajectory,
        playback_start_s: pb.playback_start,
        capped,
        trace_exhausted,
    })
}

/// The sweep dimensions of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub k_users: Vec<u32>,
    pub b_max_s: Vec<f64>,
}

/// Simulates the Cartesian product traces × grid × policies. Sessions run
/// independently (in parallel) and the result order is canonical: sorted by
/// (trace, policy, k, b_max).
pub fn run_experiment(
    traces: &[Trace],
    table: &NetworkTable,
    grid: &ExperimentGrid,
    policies: &[PolicyKind],
    model: Option<&DetectorModel>,
    template: &SessionConfig,
) -> Result<Vec<SessionLog>, SimulationError> {
    if traces.is_empty() || grid.k_users.is_empty() || grid.b_max_s.is_empty() || policies.is_empty()
    {
        return Err(SimulationError::ConfigInvalid {
            field: "experiment",
            reason: "traces, k_users, b_max_s and policies must all be non-empty".into(),
        });
    }
    if policies.contains(&PolicyKind::IobbaDetected) && model.is_none() {
        return Err(SimulationError::ConfigInvalid {
            field: "model",
            reason: "policy iobba-detected requires a detector model".into(),
        });
    }

    let mut cells = Vec::new();
    for trace in traces {
        for &k in &grid.k_users {
            for &b_max in &grid.b_max_s {
                for &policy in policies {
                    cells.push((trace, k, b_max, policy));
                }
            }
        }
    }

    use rayon::prelude::*;
    let mut logs = cells
        .par_iter()
        .map(|&(trace, k, b_max, policy)| {
            let series = throughput_series(trace, k, table)?;
            let mut config = template.clone();
            config.k_users = k;
            config.b_max_s = b_max;
            config.policy = policy.mode();
            let detection = match policy {
                PolicyKind::Baseline => DetectionSource::None,
                PolicyKind::IobbaTrue => DetectionSource::GroundTruth(trace),
                PolicyKind::IobbaDetected => DetectionSource::Estimated {
                    model: model.expect("checked above"),
                    trace,
                },
            };
            let tag = SessionTag {
                trace_id: trace.id().to_string(),
                policy: policy.label().to_string(),
                k_users: k,
                b_max_s: b_max,
            };
            simulate_session(&series, &detection, &config, tag)
        })
        .collect::<Result<Vec<_>, _>>()?;
    logs.sort_by(|a, b| a.tag.order(&b.tag));
    Ok(logs)
}

#[derive(Serialize)]
struct LogSummary<'a> {
    trace_id: &'a str,
    policy: &'a str,
    k_users: u32,
    b_max_s: f64,
    video_duration_s: f64,
    segment_duration_s: f64,
    startup_threshold_s: f64,
    upgrade_persistence: u32,
    segments_completed: usize,
    playback_start_s: Option<f64>,
    capped: bool,
    trace_exhausted: bool,
}

/// Writes the line-oriented session log: a `#`-prefixed JSON summary, then
/// one CSV row per event (`record,wall_s,a,b`), then the buffer trajectory
/// as `buffer` records.
pub fn write_session_log_csv(log: &SessionLog, mut w: impl Write) -> io::Result<()> {
    let summary = LogSummary {
        trace_id: &log.tag.trace_id,
        policy: &log.tag.policy,
        k_users: log.tag.k_users,
        b_max_s: log.tag.b_max_s,
        video_duration_s: log.video_duration_s,
        segment_duration_s: log.ladder.segment_duration_s(),
        startup_threshold_s: log.startup_threshold_s,
        upgrade_persistence: log.upgrade_persistence,
        segments_completed: log.segments_completed(),
        playback_start_s: log.playback_start_s,
        capped: log.capped,
        trace_exhausted: log.trace_exhausted,
    };
    writeln!(w, "# {}", serde_json::to_string(&summary)?)?;
    writeln!(w, "record,wall_s,a,b")?;
    for event in &log.events {
        match *event {
            SessionEvent::SegmentRequested {
                wall_s,
                index,
                quality,
            } => writeln!(w, "requested,{wall_s},{index},{quality}")?,
            SessionEvent::SegmentCompleted {
                wall_s,
                bits,
                download_s,
            } => writeln!(w, "completed,{wall_s},{bits},{download_s}")?,
            SessionEvent::StallStarted { wall_s } => writeln!(w, "stall_start,{wall_s},,")?,
            SessionEvent::StallEnded { wall_s } => writeln!(w, "stall_end,{wall_s},,")?,
            SessionEvent::QualityChanged { wall_s, from, to } => {
                writeln!(w, "quality_change,{wall_s},{from},{to}")?
            }
            SessionEvent::SessionEnded { wall_s } => writeln!(w, "session_end,{wall_s},,")?,
        }
    }
    for &(t, buffer) in &log.buffer_trajectory {
        writeln!(w, "buffer,{t},{buffer},")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{CoveragePhase, ScalarModel, SynthesisSpec, TraceSample};
    use crate::trace::{ClassModel, NetworkType};

    fn tag(policy: &str) -> SessionTag {
        SessionTag {
            trace_id: "test".into(),
            policy: policy.into(),
            k_users: 1,
            b_max_s: 150.0,
        }
    }

    fn baseline_config() -> SessionConfig {
        SessionConfig::new(150.0, 1, Ladder::reference(), PolicyMode::Baseline)
    }

    #[test]
    fn steady_state_at_exact_sustainable_rate() {
        // throughput exactly S(R1)/segment_duration: every download takes one
        // segment duration, quality stays 1, no stalls after startup
        let ladder = Ladder::reference();
        let rate = ladder.segment_bits(1) / ladder.segment_duration_s();
        let series = ThroughputSeries::constant(rate);
        let log = simulate_session(
            &series,
            &DetectionSource::None,
            &baseline_config(),
            tag("baseline"),
        )
        .unwrap();
        assert!(!log.capped);
        assert_eq!(log.segments_completed(), 149);
        assert!(log.qualities().iter().all(|&q| q == 1));
        assert_eq!(log.rebuffering_count(), 0);
        assert_eq!(log.quality_change_count(), 0);
        // every download is exactly 4 s
        for e in &log.events {
            if let SessionEvent::SegmentCompleted { download_s, .. } = e {
                assert_eq!(*download_s, 4.0);
            }
        }
    }

    #[test]
    fn zero_throughput_leaves_one_open_stall_and_caps() {
        let series = ThroughputSeries::constant(0.0);
        let log = simulate_session(
            &series,
            &DetectionSource::None,
            &baseline_config(),
            tag("baseline"),
        )
        .unwrap();
        assert!(log.capped);
        assert_eq!(log.end_time_s(), 5.0 * 596.0);
        let starts = log
            .events
            .iter()
            .filter(|e| matches!(e, SessionEvent::StallStarted { .. }))
            .count();
        let ends = log
            .events
            .iter()
            .filter(|e| matches!(e, SessionEvent::StallEnded { .. }))
            .count();
        assert_eq!(starts, 1);
        assert_eq!(ends, 0);
        assert_eq!(log.playback_start_s, None);
        assert_eq!(log.rebuffering_count(), 0);
    }

    #[test]
    fn sessions_are_deterministic() {
        let series = ThroughputSeries::new(vec![(0.0, 2e6), (100.0, 0.3e6), (300.0, 5e6)]).unwrap();
        let a = simulate_session(&series, &DetectionSource::None, &baseline_config(), tag("b"))
            .unwrap();
        let b = simulate_session(&series, &DetectionSource::None, &baseline_config(), tag("b"))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn buffer_never_exceeds_capacity() {
        let series = ThroughputSeries::constant(1e9);
        let log = simulate_session(
            &series,
            &DetectionSource::None,
            &baseline_config(),
            tag("baseline"),
        )
        .unwrap();
        assert!(!log.capped);
        assert_eq!(log.segments_completed(), 149);
        for &(t, b) in &log.buffer_trajectory {
            assert!(b >= -1e-9 && b <= 150.0 + 1e-9, "buffer {b} at t={t}");
        }
    }

    #[test]
    fn conservation_between_completions() {
        // between consecutive completions with no stall and no idle, the
        // buffer changes by segment_duration - elapsed wall time
        let series = ThroughputSeries::new(vec![(0.0, 1.5e6), (200.0, 0.4e6)]).unwrap();
        let log = simulate_session(
            &series,
            &DetectionSource::None,
            &baseline_config(),
            tag("baseline"),
        )
        .unwrap();
        let completions: Vec<(f64, f64)> = log
            .buffer_trajectory
            .iter()
            .copied()
            .filter(|(t, _)| {
                log.events.iter().any(|e| {
                    matches!(e, SessionEvent::SegmentCompleted { wall_s, .. } if wall_s == t)
                })
            })
            .collect();
        let requests: Vec<f64> = log
            .events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::SegmentRequested { wall_s, .. } => Some(*wall_s),
                _ => None,
            })
            .collect();
        let stalls: Vec<f64> = log
            .events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::StallStarted { wall_s } | SessionEvent::StallEnded { wall_s } => {
                    Some(*wall_s)
                }
                _ => None,
            })
            .collect();
        let mut checked = 0;
        for pair in completions.windows(2) {
            let (t0, b0) = pair[0];
            let (t1, b1) = pair[1];
            // no idle: a request happened exactly at the previous completion
            let no_idle = requests.iter().any(|&r| r == t0);
            let no_stall = !stalls.iter().any(|&s| s > t0 && s <= t1);
            if no_idle && no_stall && log.playback_start_s.map(|p| p <= t0).unwrap_or(false) {
                let expected = 4.0 - (t1 - t0);
                assert!(
                    ((b1 - b0) - expected).abs() < 1e-6,
                    "conservation violated on [{t0}, {t1}]"
                );
                checked += 1;
            }
        }
        assert!(checked > 10, "too few qualifying intervals ({checked})");
    }

    #[test]
    fn stall_count_non_increasing_in_throughput() {
        let ladder = Ladder::reference();
        let base = ladder.segment_bits(1) / ladder.segment_duration_s();
        let mut previous = usize::MAX;
        for factor in [0.5, 0.8, 1.0, 2.0, 10.0] {
            let series = ThroughputSeries::constant(base * factor);
            let log = simulate_session(
                &series,
                &DetectionSource::None,
                &baseline_config(),
                tag("baseline"),
            )
            .unwrap();
            let stalls = log.rebuffering_count();
            assert!(
                stalls <= previous,
                "stalls increased from {previous} to {stalls} at factor {factor}"
            );
            previous = stalls;
        }
    }

    fn outdoor_trace(duration: f64) -> Trace {
        let samples: Vec<TraceSample> = (0..duration as usize)
            .map(|i| TraceSample {
                timestamp_s: i as f64,
                network: NetworkType::G4,
                power_dbm: -90.0,
                confidence_radius_m: 4.0,
                truth: CoverageState::Outdoor,
            })
            .collect();
        Trace::new("outdoor", samples).unwrap()
    }

    #[test]
    fn iobba_on_all_outdoor_trace_equals_baseline() {
        let trace = outdoor_trace(3000.0);
        let series = throughput_series(&trace, 4, &NetworkTable::standard()).unwrap();
        let mut config = baseline_config();
        config.k_users = 4;
        let base = simulate_session(&series, &DetectionSource::None, &config, tag("baseline"))
            .unwrap();
        config.policy = PolicyMode::Iobba;
        let iobba = simulate_session(
            &series,
            &DetectionSource::GroundTruth(&trace),
            &config,
            tag("iobba-true"),
        )
        .unwrap();
        assert_eq!(base.qualities(), iobba.qualities());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut c = baseline_config();
        c.k_users = 9;
        assert!(matches!(
            c.validate(),
            Err(SimulationError::ConfigInvalid { field: "k_users", .. })
        ));
        let mut c = baseline_config();
        c.video_duration_s = 595.0; // not a multiple of 4
        assert!(c.validate().is_err());
        let mut c = baseline_config();
        c.startup_threshold_s = 149.0; // above b_max - segment
        assert!(c.validate().is_err());
        let mut c = baseline_config();
        c.upgrade_persistence = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn iobba_without_detection_is_rejected() {
        let mut config = baseline_config();
        config.policy = PolicyMode::Iobba;
        let series = ThroughputSeries::constant(1e6);
        assert!(matches!(
            simulate_session(&series, &DetectionSource::None, &config, tag("iobba-true")),
            Err(SimulationError::MissingDetection)
        ));
    }

    #[test]
    fn experiment_grid_produces_the_full_product() {
        let spec = SynthesisSpec {
            timeline: vec![CoveragePhase {
                state: CoverageState::Outdoor,
                duration_s: 3000.0,
            }],
            period_s: 1.0,
            network: NetworkType::G4,
            indoor: ClassModel {
                power: ScalarModel::Normal { mean: -108.0, std_dev: 3.0 },
                radius: ScalarModel::Discrete { levels: vec![32.0], weights: vec![1.0] },
            },
            outdoor: ClassModel {
                power: ScalarModel::Normal { mean: -85.0, std_dev: 3.0 },
                radius: ScalarModel::Discrete { levels: vec![4.0], weights: vec![1.0] },
            },
        };
        let traces = vec![
            crate::trace::synthesize_trace(&spec, 1).unwrap(),
            crate::trace::synthesize_trace(&spec, 2).unwrap(),
        ];
        let grid = ExperimentGrid {
            k_users: vec![1, 2],
            b_max_s: vec![150.0],
        };
        let template = baseline_config();
        let logs = run_experiment(
            &traces,
            &NetworkTable::standard(),
            &grid,
            &[PolicyKind::Baseline, PolicyKind::IobbaTrue],
            None,
            &template,
        )
        .unwrap();
        assert_eq!(logs.len(), 8);
        // canonical order and determinism
        let logs2 = run_experiment(
            &traces,
            &NetworkTable::standard(),
            &grid,
            &[PolicyKind::Baseline, PolicyKind::IobbaTrue],
            None,
            &template,
        )
        .unwrap();
        assert_eq!(logs, logs2);
        let mut tags: Vec<String> = logs
            .iter()
            .map(|l| format!("{}/{}/{}/{}", l.tag.trace_id, l.tag.policy, l.tag.k_users, l.tag.b_max_s))
            .collect();
        let sorted = {
            let mut t = tags.clone();
            t.sort();
            t
        };
        assert_eq!(tags, sorted);
        tags.dedup();
        assert_eq!(tags.len(), 8);
    }

    #[test]
    fn missing_model_for_detected_policy_is_rejected() {
        let trace = outdoor_trace(100.0);
        let grid = ExperimentGrid { k_users: vec![1], b_max_s: vec![150.0] };
        let err = run_experiment(
            &[trace],
            &NetworkTable::standard(),
            &grid,
            &[PolicyKind::IobbaDetected],
            None,
            &baseline_config(),
        )
        .unwrap_err();
        assert!(matches!(err, SimulationError::ConfigInvalid { field: "model", .. }));
    }
}
