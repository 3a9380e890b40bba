//! QoE metrics from session logs: mean selected video rate, re-buffering
//! frequency and adaptation frequency, plus aggregation across sessions with
//! 95% confidence intervals.
//!
//! Frequencies are normalized by the nominal video duration, not wall time.
//! A stall counts once per onset; stall durations are carried as
//! supplementary columns only.

use std::collections::BTreeMap;
use std::io;
use std::io::Write;

use thiserror::Error;

use crate::simulator::{SessionEvent, SessionLog, SessionTag};

/// z-score of the two-sided 95% interval under the normal approximation.
pub const CI95_Z: f64 = 1.96;

#[derive(Debug, Error)]
pub enum QoeError {
    #[error("malformed session log: {0}")]
    MalformedLog(String),
    #[error("empty report group")]
    EmptyGroup,
}

/// The three QoE factors of one session, plus supplementary stall totals.
#[derive(Debug, Clone, PartialEq)]
pub struct QoeReport {
    pub tag: SessionTag,
    /// Time-weighted mean encoding rate of the delivered segments, bits/s.
    pub mean_bitrate_bps: f64,
    /// Re-buffering events per second of video duration.
    pub rebuffering_per_s: f64,
    /// Quality changes per second of video duration.
    pub adaptation_per_s: f64,
    pub stall_count: usize,
    pub stall_time_s: f64,
}

/// Computes the QoE factors of one session log.
pub fn qoe_from_log(log: &SessionLog) -> Result<QoeReport, QoeError> {
    validate_log(log)?;
    let qualities = log.qualities();
    let completed = log.segments_completed();
    let seg = log.ladder.segment_duration_s();
    let delivered_bits: f64 = qualities
        .iter()
        .take(completed)
        .map(|&q| log.ladder.rate_bps(q) * seg)
        .sum();
    let mean_bitrate_bps = delivered_bits / log.video_duration_s;
    let stall_count = log.rebuffering_count();
    Ok(QoeReport {
        tag: log.tag.clone(),
        mean_bitrate_bps,
        rebuffering_per_s: stall_count as f64 / log.video_duration_s,
        adaptation_per_s: log.quality_change_count() as f64 / log.video_duration_s,
        stall_count,
        stall_time_s: log.total_stall_time_s(),
    })
}

fn validate_log(log: &SessionLog) -> Result<(), QoeError> {
    if !matches!(log.events.last(), Some(SessionEvent::SessionEnded { .. })) {
        return Err(QoeError::MalformedLog(
            "log does not terminate with a session-end event".into(),
        ));
    }
    let mut prev = f64::NEG_INFINITY;
    let mut stalled = false;
    for event in &log.events {
        let t = event.wall_s();
        if t < prev {
            return Err(QoeError::MalformedLog(format!(
                "event times decrease at {t}"
            )));
        }
        prev = t;
        match event {
            SessionEvent::StallStarted { .. } => {
                if stalled {
                    return Err(QoeError::MalformedLog("nested stall start".into()));
                }
                stalled = true;
            }
            SessionEvent::StallEnded { .. } => {
                if !stalled {
                    return Err(QoeError::MalformedLog("stall end without start".into()));
                }
                stalled = false;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean, sample standard error and normal-approximation 95% half-width of
/// one metric over a group of sessions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateStat {
    pub mean: f64,
    pub standard_error: f64,
    pub ci95_halfwidth: f64,
    pub n: usize,
    /// Single-sample groups report a zero half-width; this flag marks them.
    pub single_sample: bool,
}

/// Aggregates raw metric values (arithmetic mean, n-1 standard error,
/// 1.96 * SE half-width).
pub fn aggregate_stat(values: &[f64]) -> Result<AggregateStat, QoeError> {
    if values.is_empty() {
        return Err(QoeError::EmptyGroup);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let standard_error = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(AggregateStat {
        mean,
        standard_error,
        ci95_halfwidth: CI95_Z * standard_error,
        n,
        single_sample: n == 1,
    })
}

/// Tag fields a report group can be keyed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupField {
    TraceId,
    Policy,
    KUsers,
    BMax,
}

impl GroupField {
    pub fn column_name(&self) -> &'static str {
        match self {
            GroupField::TraceId => "trace_id",
            GroupField::Policy => "policy",
            GroupField::KUsers => "k_users",
            GroupField::BMax => "bmax_s",
        }
    }

    fn value_of(&self, tag: &SessionTag) -> String {
        match self {
            GroupField::TraceId => tag.trace_id.clone(),
            GroupField::Policy => tag.policy.clone(),
            GroupField::KUsers => tag.k_users.to_string(),
            GroupField::BMax => tag.b_max_s.to_string(),
        }
    }
}

/// One group's aggregated metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateGroup {
    /// Key values in `group_by` order.
    pub key: Vec<String>,
    pub n: usize,
    pub mean_bitrate: AggregateStat,
    pub rebuffering: AggregateStat,
    pub adaptation: AggregateStat,
}

/// Groups reports by the requested tag fields and aggregates each of the
/// three QoE metrics. Groups come back in lexicographic key order.
pub fn aggregate(
    reports: &[QoeReport],
    group_by: &[GroupField],
) -> Result<Vec<AggregateGroup>, QoeError> {
    if reports.is_empty() {
        return Err(QoeError::EmptyGroup);
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&QoeReport>> = BTreeMap::new();
    for report in reports {
        let key: Vec<String> = group_by.iter().map(|f| f.value_of(&report.tag)).collect();
        groups.entry(key).or_default().push(report);
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let collect = |f: fn(&QoeReport) -> f64| -> Vec<f64> {
                members.iter().map(|r| f(r)).collect()
            };
            Ok(AggregateGroup {
                key,
                n: members.len(),
                mean_bitrate: aggregate_stat(&collect(|r| r.mean_bitrate_bps))?,
                rebuffering: aggregate_stat(&collect(|r| r.rebuffering_per_s))?,
                adaptation: aggregate_stat(&collect(|r| r.adaptation_per_s))?,
            })
        })
        .collect()
}

/// Writes per-session reports:
/// `trace_id,policy,k_users,bmax_s,mean_bitrate_bps,rebuf_per_s,adapt_per_s`
/// plus the supplementary stall columns.
pub fn write_report_csv(reports: &[QoeReport], mut w: impl Write) -> io::Result<()> {
    writeln!(
        w,
        "trace_id,policy,k_users,bmax_s,mean_bitrate_bps,rebuf_per_s,adapt_per_s,stall_count,stall_time_s"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.tag.trace_id,
            r.tag.policy,
            r.tag.k_users,
            r.tag.b_max_s,
            r.mean_bitrate_bps,
            r.rebuffering_per_s,
            r.adaptation_per_s,
            r.stall_count,
            r.stall_time_s
        )?;
    }
    Ok(())
}

/// Writes aggregated groups: the group key columns, then
/// `metric,mean,se,ci95,n` rows (one per QoE metric).
pub fn write_aggregate_csv(
    groups: &[AggregateGroup],
    group_by: &[GroupField],
    mut w: impl Write,
) -> io::Result<()> {
    let key_cols: Vec<&str> = group_by.iter().map(|f| f.column_name()).collect();
    writeln!(w, "{},metric,mean,se,ci95,n", key_cols.join(","))?;
    for group in groups {
        let key = group.key.join(",");
        for (metric, stat) in [
            ("mean_bitrate_bps", &group.mean_bitrate),
            ("rebuf_per_s", &group.rebuffering),
            ("adapt_per_s", &group.adaptation),
        ] {
            writeln!(
                w,
                "{key},{metric},{},{},{},{}",
                stat.mean, stat.standard_error, stat.ci95_halfwidth, stat.n
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Ladder, PolicyMode};
    use crate::radio::ThroughputSeries;
    use crate::simulator::{simulate_session, DetectionSource, SessionConfig};

    fn tag() -> SessionTag {
        SessionTag {
            trace_id: "t".into(),
            policy: "baseline".into(),
            k_users: 1,
            b_max_s: 150.0,
        }
    }

    fn synthetic_log(events: Vec<SessionEvent>, playback_start: Option<f64>) -> SessionLog {
        SessionLog {
            tag: tag(),
            ladder: Ladder::reference(),
            b_max_s: 150.0,
            startup_threshold_s: 8.0,
            video_duration_s: 596.0,
            upgrade_persistence: 3,
            events,
            buffer_trajectory: vec![],
            playback_start_s: playback_start,
            capped: false,
            trace_exhausted: false,
        }
    }

    #[test]
    fn constant_session_yields_min_rate_and_zero_frequencies() {
        let ladder = Ladder::reference();
        let rate = ladder.segment_bits(1) / ladder.segment_duration_s();
        let series = ThroughputSeries::constant(rate);
        let config = SessionConfig::new(150.0, 1, ladder, PolicyMode::Baseline);
        let log = simulate_session(&series, &DetectionSource::None, &config, tag()).unwrap();
        let report = qoe_from_log(&log).unwrap();
        assert!((report.mean_bitrate_bps - 129e3).abs() < 1e-9);
        assert_eq!(report.rebuffering_per_s, 0.0);
        assert_eq!(report.adaptation_per_s, 0.0);
    }

    #[test]
    fn two_stalls_normalize_by_video_duration() {
        let mut events = vec![
            SessionEvent::StallStarted { wall_s: 0.0 },
            SessionEvent::StallEnded { wall_s: 5.0 },
        ];
        let mut t = 5.0;
        for j in 1..=149u32 {
            events.push(SessionEvent::SegmentRequested { wall_s: t, index: j, quality: 1 });
            t += 4.0;
            events.push(SessionEvent::SegmentCompleted { wall_s: t, bits: 516e3, download_s: 4.0 });
        }
        events.push(SessionEvent::StallStarted { wall_s: t + 1.0 });
        events.push(SessionEvent::StallEnded { wall_s: t + 3.0 });
        events.push(SessionEvent::StallStarted { wall_s: t + 10.0 });
        events.push(SessionEvent::StallEnded { wall_s: t + 12.0 });
        events.push(SessionEvent::SessionEnded { wall_s: t + 20.0 });
        let log = synthetic_log(events, Some(5.0));
        let report = qoe_from_log(&log).unwrap();
        assert_eq!(report.stall_count, 2);
        assert!((report.rebuffering_per_s - 2.0 / 596.0).abs() < 1e-15);
        assert!((report.rebuffering_per_s - 3.36e-3).abs() < 2e-5);
    }

    #[test]
    fn alternating_qualities_count_changes() {
        let mut events = vec![
            SessionEvent::StallStarted { wall_s: 0.0 },
            SessionEvent::StallEnded { wall_s: 4.0 },
        ];
        let mut t = 4.0;
        let mut prev_q = None;
        for j in 1..=149u32 {
            let q = if j % 2 == 1 { 1 } else { 2 };
            if let Some(p) = prev_q {
                events.push(SessionEvent::QualityChanged { wall_s: t, from: p, to: q });
            }
            prev_q = Some(q);
            events.push(SessionEvent::SegmentRequested { wall_s: t, index: j, quality: q });
            t += 4.0;
            events.push(SessionEvent::SegmentCompleted { wall_s: t, bits: 1.0, download_s: 4.0 });
        }
        events.push(SessionEvent::SessionEnded { wall_s: t });
        let log = synthetic_log(events, Some(4.0));
        let report = qoe_from_log(&log).unwrap();
        assert!((report.adaptation_per_s - 148.0 / 596.0).abs() < 1e-15);
    }

    #[test]
    fn malformed_logs_are_rejected() {
        let log = synthetic_log(vec![SessionEvent::StallStarted { wall_s: 0.0 }], None);
        assert!(matches!(qoe_from_log(&log), Err(QoeError::MalformedLog(_))));
        let log = synthetic_log(
            vec![
                SessionEvent::StallStarted { wall_s: 0.0 },
                SessionEvent::StallStarted { wall_s: 1.0 },
                SessionEvent::SessionEnded { wall_s: 2.0 },
            ],
            None,
        );
        assert!(matches!(qoe_from_log(&log), Err(QoeError::MalformedLog(_))));
    }

    #[test]
    fn aggregate_closed_forms() {
        // identical values: zero standard error
        let s = aggregate_stat(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.standard_error, 0.0);
        assert_eq!(s.ci95_halfwidth, 0.0);
        assert!(!s.single_sample);

        // two values a, b: mean (a+b)/2, SE |a-b|/2
        let (a, b) = (2.0, 8.0);
        let s = aggregate_stat(&[a, b]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!((s.standard_error - 3.0).abs() < 1e-12);
        assert!((s.ci95_halfwidth - 1.96 * 3.0).abs() < 1e-12);

        // single sample: flagged, zero width
        let s = aggregate_stat(&[7.0]).unwrap();
        assert!(s.single_sample);
        assert_eq!(s.ci95_halfwidth, 0.0);

        assert!(matches!(aggregate_stat(&[]), Err(QoeError::EmptyGroup)));
    }

    fn report(policy: &str, k: u32, bitrate: f64) -> QoeReport {
        QoeReport {
            tag: SessionTag {
                trace_id: "t".into(),
                policy: policy.into(),
                k_users: k,
                b_max_s: 150.0,
            },
            mean_bitrate_bps: bitrate,
            rebuffering_per_s: bitrate / 1e6,
            adaptation_per_s: bitrate / 1e7,
            stall_count: 0,
            stall_time_s: 0.0,
        }
    }

    #[test]
    fn aggregation_groups_and_is_permutation_invariant() {
        let reports = vec![
            report("baseline", 1, 1e6),
            report("baseline", 1, 2e6),
            report("iobba-true", 1, 3e6),
            report("baseline", 2, 4e6),
        ];
        let groups = aggregate(&reports, &[GroupField::Policy, GroupField::KUsers]).unwrap();
        assert_eq!(groups.len(), 3);
        let g = &groups[0];
        assert_eq!(g.key, vec!["baseline".to_string(), "1".to_string()]);
        assert_eq!(g.n, 2);
        assert_eq!(g.mean_bitrate.mean, 1.5e6);

        // brute-force group mean
        let manual = (1e6 + 2e6) / 2.0;
        assert_eq!(g.mean_bitrate.mean, manual);

        let mut reversed = reports.clone();
        reversed.reverse();
        let groups2 = aggregate(&reversed, &[GroupField::Policy, GroupField::KUsers]).unwrap();
        assert_eq!(groups.len(), groups2.len());
        for (a, b) in groups.iter().zip(&groups2) {
            assert_eq!(a.key, b.key);
            assert!((a.mean_bitrate.mean - b.mean_bitrate.mean).abs() < 1e-9);
            assert!((a.rebuffering.standard_error - b.rebuffering.standard_error).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_headers_are_stable() {
        let reports = vec![report("baseline", 1, 1e6)];
        let mut buf = Vec::new();
        write_report_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "trace_id,policy,k_users,bmax_s,mean_bitrate_bps,rebuf_per_s,adapt_per_s"
        ));

        let groups = aggregate(&reports, &[GroupField::Policy]).unwrap();
        let mut buf = Vec::new();
        write_aggregate_csv(&groups, &[GroupField::Policy], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("policy,metric,mean,se,ci95,n"));
        assert_eq!(text.lines().count(), 4);
    }
}
