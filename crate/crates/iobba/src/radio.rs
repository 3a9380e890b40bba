//! Received power → throughput via a capped Shannon model with per-network
//! parameters and equal round-robin sharing among users.
//!
//! Interference is folded into the sensitivity threshold, so the SINR is
//! simply received power over threshold, truncated at 20 dB (the highest
//! modulation scheme). Cell throughput is `B * log2(1 + sinr)` over the data
//! bandwidth of the serving network type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{NetworkType, Trace, POWER_DBM_MAX, POWER_DBM_MIN};

/// SINR truncation point: 20 dB, i.e. a linear ratio of 100.
pub const SINR_CAP_DB: f64 = 20.0;
pub const SINR_CAP_LINEAR: f64 = 100.0;

/// Maximum number of users per channel (set by 2G).
pub const MAX_USERS_PER_CHANNEL: u32 = 8;

#[derive(Debug, Error)]
pub enum RadioError {
    #[error("user count {k} outside 1..={MAX_USERS_PER_CHANNEL}")]
    UserCountOutOfRange { k: u32 },
    #[error("invalid network params: {0}")]
    InvalidParams(String),
    #[error("invalid throughput series: {0}")]
    InvalidSeries(String),
}

/// Per-network radio parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Bandwidth over which received power is measured, in Hz.
    pub measured_bandwidth_hz: f64,
    /// Bandwidth available for data, in Hz.
    pub data_bandwidth_hz: f64,
    /// Sensitivity threshold in dBm over the measured bandwidth.
    pub sensitivity_dbm: f64,
}

impl NetworkParams {
    pub fn validate(&self) -> Result<(), RadioError> {
        if !(self.measured_bandwidth_hz > 0.0 && self.measured_bandwidth_hz.is_finite()) {
            return Err(RadioError::InvalidParams(format!(
                "measured bandwidth {} must be > 0",
                self.measured_bandwidth_hz
            )));
        }
        if !(self.data_bandwidth_hz > 0.0 && self.data_bandwidth_hz.is_finite()) {
            return Err(RadioError::InvalidParams(format!(
                "data bandwidth {} must be > 0",
                self.data_bandwidth_hz
            )));
        }
        if !(self.sensitivity_dbm >= POWER_DBM_MIN && self.sensitivity_dbm <= POWER_DBM_MAX) {
            return Err(RadioError::InvalidParams(format!(
                "sensitivity threshold {} dBm outside [{POWER_DBM_MIN}, {POWER_DBM_MAX}]",
                self.sensitivity_dbm
            )));
        }
        Ok(())
    }

    /// Highest cell throughput reachable under the SINR cap, in bits/s.
    pub fn max_cell_throughput_bps(&self) -> f64 {
        self.data_bandwidth_hz * (1.0 + SINR_CAP_LINEAR).log2()
    }
}

/// The per-network parameter table (2G/3G/4G).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkTable {
    pub g2: NetworkParams,
    pub g3: NetworkParams,
    pub g4: NetworkParams,
}

impl NetworkTable {
    /// Measured defaults: 2G (200 kHz, 200 kHz, -104 dBm), 3G (3.84 MHz,
    /// 5 MHz, -106 dBm), 4G (15 kHz, 18 MHz, -94 dBm). The 4G data bandwidth
    /// is the usable 90% of a 20 MHz carrier, already baked in.
    pub fn standard() -> Self {
        NetworkTable {
            g2: NetworkParams {
                measured_bandwidth_hz: 200e3,
                data_bandwidth_hz: 200e3,
                sensitivity_dbm: -104.0,
            },
            g3: NetworkParams {
                measured_bandwidth_hz: 3.84e6,
                data_bandwidth_hz: 5e6,
                sensitivity_dbm: -106.0,
            },
            g4: NetworkParams {
                measured_bandwidth_hz: 15e3,
                data_bandwidth_hz: 18e6,
                sensitivity_dbm: -94.0,
            },
        }
    }

    pub fn params(&self, network: NetworkType) -> &NetworkParams {
        match network {
            NetworkType::G2 => &self.g2,
            NetworkType::G3 => &self.g3,
            NetworkType::G4 => &self.g4,
        }
    }

    pub fn validate(&self) -> Result<(), RadioError> {
        self.g2.validate()?;
        self.g3.validate()?;
        self.g4.validate()
    }
}

impl Default for NetworkTable {
    fn default() -> Self {
        Self::standard()
    }
}

/// Linear SINR from received power: `10^((power - threshold)/10)`, truncated
/// at 20 dB (ratio 100).
pub fn sinr_linear(power_dbm: f64, params: &NetworkParams) -> f64 {
    let ratio = 10f64.powf((power_dbm - params.sensitivity_dbm) / 10.0);
    ratio.min(SINR_CAP_LINEAR)
}

/// Cell throughput in bits/s: `B * log2(1 + sinr)`.
pub fn cell_throughput(power_dbm: f64, params: &NetworkParams) -> f64 {
    params.data_bandwidth_hz * (1.0 + sinr_linear(power_dbm, params)).log2()
}

/// Round-robin share of the cell throughput for one of `k_users` users.
pub fn per_user_throughput(cell_rate_bps: f64, k_users: u32) -> Result<f64, RadioError> {
    if k_users < 1 || k_users > MAX_USERS_PER_CHANNEL {
        return Err(RadioError::UserCountOutOfRange { k: k_users });
    }
    Ok(cell_rate_bps / k_users as f64)
}

/// A piecewise-constant per-user rate over wall time: each point's rate holds
/// until the next timestamp, and the last rate holds indefinitely.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputSeries {
    points: Vec<(f64, f64)>,
}

impl ThroughputSeries {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, RadioError> {
        if points.is_empty() {
            return Err(RadioError::InvalidSeries("no points".into()));
        }
        for window in points.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(RadioError::InvalidSeries(format!(
                    "timestamps {} -> {} not strictly increasing",
                    window[0].0, window[1].0
                )));
            }
        }
        for &(t, rate) in &points {
            if !(t.is_finite() && rate.is_finite() && rate >= 0.0) {
                return Err(RadioError::InvalidSeries(format!(
                    "point ({t}, {rate}) must be finite with non-negative rate"
                )));
            }
        }
        Ok(ThroughputSeries { points })
    }

    /// A series holding a single constant rate from t = 0.
    pub fn constant(rate_bps: f64) -> Self {
        ThroughputSeries {
            points: vec![(0.0, rate_bps.max(0.0))],
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn end_time(&self) -> f64 {
        self.points[self.points.len() - 1].0
    }

    /// Rate in effect at wall time `t` (first rate before the series starts).
    pub fn rate_at(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|&(ts, _)| ts <= t);
        self.points[idx.saturating_sub(1)].1
    }

    /// Exact time needed to transfer `bits` starting at wall time `start`,
    /// integrating the piecewise-constant rate. Returns `f64::INFINITY` when
    /// the transfer can never complete (trailing zero rate).
    pub fn time_to_transfer(&self, start: f64, bits: f64) -> f64 {
        if bits <= 0.0 {
            return 0.0;
        }
        let mut idx = self.points.partition_point(|&(ts, _)| ts <= start);
        idx = idx.saturating_sub(1);
        let mut cursor = start;
        let mut remaining = bits;
        let mut elapsed = 0.0;
        loop {
            let rate = self.points[idx].1;
            let segment_end = self.points.get(idx + 1).map(|&(ts, _)| ts);
            match segment_end {
                None => {
                    if rate <= 0.0 {
                        return f64::INFINITY;
                    }
                    return elapsed + remaining / rate;
                }
                Some(end) => {
                    let span = end - cursor;
                    if rate > 0.0 {
                        let capacity = rate * span;
                        if capacity >= remaining {
                            return elapsed + remaining / rate;
                        }
                        remaining -= capacity;
                    }
                    elapsed += span;
                    cursor = end;
                    idx += 1;
                }
            }
        }
    }
}

/// Per-sample application of the Shannon model plus sharing: one output point
/// per trace sample, using that sample's network parameters.
pub fn throughput_series(
    trace: &Trace,
    k_users: u32,
    table: &NetworkTable,
) -> Result<ThroughputSeries, RadioError> {
    let mut points = Vec::with_capacity(trace.len());
    for sample in trace.samples() {
        let params = table.params(sample.network);
        let cell = cell_throughput(sample.power_dbm, params);
        let per_user = per_user_throughput(cell, k_users)?;
        points.push((sample.timestamp_s, per_user));
    }
    ThroughputSeries::new(points)
}
