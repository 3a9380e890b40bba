//! Buffer-based quality selection: segment maps and the per-request decision
//! rules of the linear baseline policy and IOBBA.
//!
//! A segment map takes the playback buffer occupancy at a request point to a
//! target mean segment size. Below `r_lower` it pins the lowest quality,
//! above `r_upper` the highest; in between the baseline interpolates
//! linearly while IOBBA's indoor map grows exponentially, so it backs off
//! harder when the buffer shrinks. Indoors, IOBBA additionally requires `m`
//! consecutive upgrade indications before stepping the quality up one level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::CoverageState;

/// Upper map threshold as a fraction of the maximum buffer.
pub const UPPER_THRESHOLD_FRACTION: f64 = 0.9;
/// Constant indoor reservoir as a fraction of the maximum buffer.
pub const INDOOR_RESERVOIR_FRACTION: f64 = 0.3;
/// Clamp bounds for the dynamically computed outdoor reservoir.
pub const OUTDOOR_RESERVOIR_MIN_FRACTION: f64 = 0.1;
pub const OUTDOOR_RESERVOIR_MAX_FRACTION: f64 = 0.3;
/// Default number of consecutive upgrade indications required indoors.
pub const DEFAULT_UPGRADE_PERSISTENCE: u32 = 3;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid thresholds: r_lower={r_lower_s}, r_upper={r_upper_s}, b_max={b_max_s} (need 0 < r_lower < r_upper <= b_max)")]
    InvalidThresholds {
        r_lower_s: f64,
        r_upper_s: f64,
        b_max_s: f64,
    },
    #[error("degenerate ladder: segment sizes must satisfy 0 < min < max")]
    DegenerateLadder,
    #[error("invalid ladder: {0}")]
    InvalidLadder(String),
}

/// One encoding quality level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    /// 1-based quality index.
    pub index: usize,
    pub width: u32,
    pub height: u32,
    /// Maximum encoding rate in bits/s.
    pub max_encoding_rate_bps: f64,
}

/// The ordered set of representations plus the common segment duration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ladder {
    representations: Vec<Representation>,
    segment_duration_s: f64,
}

impl Ladder {
    pub fn new(
        representations: Vec<Representation>,
        segment_duration_s: f64,
    ) -> Result<Self, PolicyError> {
        if representations.len() < 2 {
            return Err(PolicyError::InvalidLadder(
                "need at least 2 representations".into(),
            ));
        }
        if !(segment_duration_s > 0.0 && segment_duration_s.is_finite()) {
            return Err(PolicyError::InvalidLadder(format!(
                "segment duration {segment_duration_s} must be > 0"
            )));
        }
        for (i, rep) in representations.iter().enumerate() {
            if rep.index != i + 1 {
                return Err(PolicyError::InvalidLadder(format!(
                    "representation at position {} has index {}, expected {}",
                    i,
                    rep.index,
                    i + 1
                )));
            }
            if !(rep.max_encoding_rate_bps > 0.0 && rep.max_encoding_rate_bps.is_finite()) {
                return Err(PolicyError::InvalidLadder(format!(
                    "representation {} rate {} must be > 0",
                    rep.index, rep.max_encoding_rate_bps
                )));
            }
            if i > 0 && rep.max_encoding_rate_bps <= representations[i - 1].max_encoding_rate_bps {
                return Err(PolicyError::InvalidLadder(format!(
                    "rates must strictly increase with index (index {})",
                    rep.index
                )));
            }
        }
        Ok(Ladder {
            representations,
            segment_duration_s,
        })
    }

    /// The five-level H.264 ladder used by the reference experiments:
    /// 129 / 378 / 578 / 1536 / 3993 kbps at 4-second segments.
    pub fn reference() -> Self {
        let rows = [
            (1, 320, 240, 129e3),
            (2, 480, 360, 378e3),
            (3, 854, 480, 578e3),
            (4, 1280, 720, 1536e3),
            (5, 1920, 1080, 3993e3),
        ];
        let representations = rows
            .iter()
            .map(|&(index, width, height, rate)| Representation {
                index,
                width,
                height,
                max_encoding_rate_bps: rate,
            })
            .collect();
        Ladder::new(representations, 4.0).expect("reference ladder is valid")
    }

    pub fn representations(&self) -> &[Representation] {
        &self.representations
    }

    pub fn len(&self) -> usize {
        self.representations.len()
    }

    pub fn is_empty(&self) -> bool {
        false // >= 2 representations by construction
    }

    pub fn segment_duration_s(&self) -> f64 {
        self.segment_duration_s
    }

    /// Encoding rate of quality `index` (1-based), in bits/s.
    pub fn rate_bps(&self, index: usize) -> f64 {
        self.representations[index - 1].max_encoding_rate_bps
    }

    /// Mean segment size of quality `index`, in bits.
    pub fn segment_bits(&self, index: usize) -> f64 {
        self.rate_bps(index) * self.segment_duration_s
    }

    pub fn min_segment_bits(&self) -> f64 {
        self.segment_bits(1)
    }

    pub fn max_segment_bits(&self) -> f64 {
        self.segment_bits(self.len())
    }
}

/// Functional form of a segment map between its thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapShape {
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MapCurve {
    Linear,
    Exponential { alpha: f64, beta: f64 },
}

/// A monotone map from buffer occupancy (seconds) to target mean segment
/// size (bits), clamped to the extreme representations outside
/// `[r_lower, r_upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMap {
    curve: MapCurve,
    r_lower_s: f64,
    r_upper_s: f64,
    b_max_s: f64,
    min_size_bits: f64,
    max_size_bits: f64,
}

impl SegmentMap {
    pub fn shape(&self) -> MapShape {
        match self.curve {
            MapCurve::Linear => MapShape::Linear,
            MapCurve::Exponential { .. } => MapShape::Exponential,
        }
    }

    pub fn r_lower_s(&self) -> f64 {
        self.r_lower_s
    }

    pub fn r_upper_s(&self) -> f64 {
        self.r_upper_s
    }

    pub fn b_max_s(&self) -> f64 {
        self.b_max_s
    }

    /// Exponential coefficients `(alpha, beta)` of `alpha * beta^buffer`,
    /// when this map is exponential.
    pub fn coefficients(&self) -> Option<(f64, f64)> {
        match self.curve {
            MapCurve::Linear => None,
            MapCurve::Exponential { alpha, beta } => Some((alpha, beta)),
        }
    }

    /// Target mean segment size at buffer occupancy `buffer_s`, in bits.
    pub fn segment_size_at(&self, buffer_s: f64) -> f64 {
        if buffer_s <= self.r_lower_s {
            return self.min_size_bits;
        }
        if buffer_s >= self.r_upper_s {
            return self.max_size_bits;
        }
        match self.curve {
            MapCurve::Linear => {
                let frac = (buffer_s - self.r_lower_s) / (self.r_upper_s - self.r_lower_s);
                self.min_size_bits + frac * (self.max_size_bits - self.min_size_bits)
            }
            MapCurve::Exponential { alpha, beta } => alpha * beta.powf(buffer_s),
        }
    }
}

fn check_thresholds(r_lower_s: f64, r_upper_s: f64, b_max_s: f64) -> Result<(), PolicyError> {
    let ok = r_lower_s > 0.0
        && r_lower_s < r_upper_s
        && r_upper_s <= b_max_s
        && r_lower_s.is_finite()
        && r_upper_s.is_finite()
        && b_max_s.is_finite();
    if ok {
        Ok(())
    } else {
        Err(PolicyError::InvalidThresholds {
            r_lower_s,
            r_upper_s,
            b_max_s,
        })
    }
}

/// Affine interpolation between `(r_lower, min segment size)` and
/// `(r_upper, max segment size)`.
pub fn build_linear_map(
    ladder: &Ladder,
    r_lower_s: f64,
    r_upper_s: f64,
    b_max_s: f64,
) -> Result<SegmentMap, PolicyError> {
    check_thresholds(r_lower_s, r_upper_s, b_max_s)?;
    Ok(SegmentMap {
        curve: MapCurve::Linear,
        r_lower_s,
        r_upper_s,
        b_max_s,
        min_size_bits: ladder.min_segment_bits(),
        max_size_bits: ladder.max_segment_bits(),
    })
}

/// Exponential map `alpha * beta^buffer` with the coefficients pinned at the
/// boundary values: `beta = (max/min)^(1/(r_upper - r_lower))` and
/// `alpha = min * beta^(-r_lower)`.
pub fn build_exponential_map(
    ladder: &Ladder,
    r_lower_s: f64,
    r_upper_s: f64,
    b_max_s: f64,
) -> Result<SegmentMap, PolicyError> {
    check_thresholds(r_lower_s, r_upper_s, b_max_s)?;
    let min = ladder.min_segment_bits();
    let max = ladder.max_segment_bits();
    if !(max > min && min > 0.0) {
        return Err(PolicyError::DegenerateLadder);
    }
    let beta = (max / min).powf(1.0 / (r_upper_s - r_lower_s));
    let alpha = min * beta.powf(-r_lower_s);
    Ok(SegmentMap {
        curve: MapCurve::Exponential { alpha, beta },
        r_lower_s,
        r_upper_s,
        b_max_s,
        min_size_bits: min,
        max_size_bits: max,
    })
}

/// Largest quality whose mean segment size does not exceed the map value;
/// quality 1 if even the lowest is larger.
pub fn quantize_to_quality(map_value_bits: f64, ladder: &Ladder) -> usize {
    debug_assert!(map_value_bits > 0.0);
    for index in (1..=ladder.len()).rev() {
        if ladder.segment_bits(index) <= map_value_bits {
            return index;
        }
    }
    1
}

/// Dynamic outdoor reservoir: the time needed to download one
/// maximum-quality segment at the recent throughput estimate, clamped to
/// `[0.1, 0.3] * b_max`.
pub fn outdoor_r_lower(ladder: &Ladder, recent_throughput_bps: f64, b_max_s: f64) -> f64 {
    let lo = OUTDOOR_RESERVOIR_MIN_FRACTION * b_max_s;
    let hi = OUTDOOR_RESERVOIR_MAX_FRACTION * b_max_s;
    if recent_throughput_bps <= 0.0 {
        return hi;
    }
    (ladder.max_segment_bits() / recent_throughput_bps).clamp(lo, hi)
}

/// Which decision rule a session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Baseline,
    Iobba,
}

/// Decision state threaded through consecutive segment requests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyState {
    pub mode: PolicyMode,
    /// 1-based quality of the most recent request.
    pub current_quality: usize,
    /// Consecutive indoor requests for which the map indicated an upgrade.
    pub upgrade_streak: u32,
    /// Upgrade persistence threshold (the m-rule). At least 1.
    pub m: u32,
    pub last_detection: CoverageState,
}

impl PolicyState {
    pub fn new(mode: PolicyMode, m: u32) -> Self {
        PolicyState {
            mode,
            current_quality: 1,
            upgrade_streak: 0,
            m: m.max(1),
            last_detection: CoverageState::Outdoor,
        }
    }
}

/// The pair of segment maps a decision chooses between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyMaps {
    pub indoor: SegmentMap,
    pub outdoor: SegmentMap,
}

/// Picks the quality of the next segment and returns the updated state.
///
/// Baseline mode quantizes the outdoor (linear) map at the buffer occupancy
/// and ignores the detection. IOBBA does the same while outdoors; indoors it
/// quantizes the indoor map, applies downgrades immediately, and applies an
/// upgrade only after `m` consecutive upgrade indications, stepping up a
/// single level (a downgrade, an equal candidate or an outdoor detection
/// resets the streak).
pub fn next_quality(
    state: &PolicyState,
    buffer_s: f64,
    detection: CoverageState,
    maps: &PolicyMaps,
    ladder: &Ladder,
) -> (usize, PolicyState) {
    let mut next = *state;
    next.last_detection = detection;
    let quality = match (state.mode, detection) {
        (PolicyMode::Baseline, _) | (PolicyMode::Iobba, CoverageState::Outdoor) => {
            next.upgrade_streak = 0;
            quantize_to_quality(maps.outdoor.segment_size_at(buffer_s), ladder)
        }
        (PolicyMode::Iobba, CoverageState::Indoor) => {
            let candidate = quantize_to_quality(maps.indoor.segment_size_at(buffer_s), ladder);
            if candidate < state.current_quality {
                next.upgrade_streak = 0;
                candidate
            } else if candidate == state.current_quality {
                next.upgrade_streak = 0;
                candidate
            } else {
                let streak = state.upgrade_streak + 1;
                if streak >= state.m {
                    next.upgrade_streak = 0;
                    state.current_quality + 1
                } else {
                    next.upgrade_streak = streak;
                    state.current_quality
                }
            }
        }
    };
    next.current_quality = quality;
    (quality, next)
}
