//! Indoors/outdoors detection by sensor fusion.
//!
//! The detector carries four class-conditional densities: received power and
//! confidence radius, each conditioned on Indoor/Outdoor. Power densities are
//! binned histograms; radius densities come from a log-normal CDF fitted to
//! the quantized empirical CDF (GPS chip sets report discrete accuracy
//! levels). Classification is MAP with uniform priors: the per-observable
//! observations are normalized across the two classes and multiplied, and
//! the larger product wins, ties breaking to Indoor.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, LogNormal, Normal};
use thiserror::Error;

use crate::trace::{CoverageState, Trace};

/// Density assigned to out-of-support observations and to empty histogram
/// bins, preventing zero-likelihood annihilation in the fused product.
pub const DEFAULT_SMOOTHING_FLOOR: f64 = 1e-6;

/// Weighted RMS residual of the fitted radius CDF above which the fit is
/// rejected.
pub const RADIUS_FIT_RMS_LIMIT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("insufficient data: {reason}")]
    InsufficientData { reason: String },
    #[error("degenerate support: all samples equal")]
    DegenerateSupport,
    #[error("curve fit diverged: rms residual {residual:.4} exceeds {limit}")]
    FitDiverged { residual: f64, limit: f64 },
    #[error("length mismatch: {predicted} predictions vs {truth} truth labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("empty label sequence")]
    Empty,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Which sensor an empirical distribution describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservableKind {
    Power,
    Radius,
}

impl fmt::Display for ObservableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservableKind::Power => write!(f, "power"),
            ObservableKind::Radius => write!(f, "radius"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinScale {
    Linear,
    Log,
}

/// Binning grid for one observable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinningPolicy {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub scale: BinScale,
}

impl BinningPolicy {
    /// 1 dBm bins over [-130, -40] dBm.
    pub fn power_default() -> Self {
        BinningPolicy {
            lo: -130.0,
            hi: -40.0,
            bins: 90,
            scale: BinScale::Linear,
        }
    }

    /// Logarithmic grid over [1, 200] m, matching GPS quantization
    /// granularity (fine at small radii, coarse at large).
    pub fn radius_default() -> Self {
        BinningPolicy {
            lo: 1.0,
            hi: 200.0,
            bins: 40,
            scale: BinScale::Log,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(DetectorError::InvalidDistribution(format!(
                "binning bounds [{}, {}] invalid",
                self.lo, self.hi
            )));
        }
        if self.bins < 2 {
            return Err(DetectorError::InvalidDistribution(
                "need at least 2 bins".into(),
            ));
        }
        if self.scale == BinScale::Log && self.lo <= 0.0 {
            return Err(DetectorError::InvalidDistribution(
                "log binning requires positive lower bound".into(),
            ));
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.bins;
        match self.scale {
            BinScale::Linear => (0..=n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
                .collect(),
            BinScale::Log => {
                let llo = self.lo.ln();
                let lhi = self.hi.ln();
                (0..=n)
                    .map(|i| (llo + (lhi - llo) * i as f64 / n as f64).exp())
                    .collect()
            }
        }
    }
}

/// A binned probability density over one observable, conditioned on one
/// coverage class. Densities integrate to 1 over the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct EmpiricalDistribution {
    observable: ObservableKind,
    class: CoverageState,
    bin_edges: Vec<f64>,
    densities: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDistribution {
    observable: ObservableKind,
    class: CoverageState,
    bin_edges: Vec<f64>,
    densities: Vec<f64>,
}

impl TryFrom<RawDistribution> for EmpiricalDistribution {
    type Error = DetectorError;

    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        EmpiricalDistribution::from_parts(raw.observable, raw.class, raw.bin_edges, raw.densities)
    }
}

impl From<EmpiricalDistribution> for RawDistribution {
    fn from(d: EmpiricalDistribution) -> Self {
        RawDistribution {
            observable: d.observable,
            class: d.class,
            bin_edges: d.bin_edges,
            densities: d.densities,
        }
    }
}

impl EmpiricalDistribution {
    /// Validates the invariants: strictly increasing edges, at least 2 bins,
    /// non-negative densities integrating to 1 within 1e-9.
    pub fn from_parts(
        observable: ObservableKind,
        class: CoverageState,
        bin_edges: Vec<f64>,
        densities: Vec<f64>,
    ) -> Result<Self, DetectorError> {
        if bin_edges.len() < 3 {
            return Err(DetectorError::InvalidDistribution(
                "need at least 2 bins".into(),
            ));
        }
        if densities.len() + 1 != bin_edges.len() {
            return Err(DetectorError::InvalidDistribution(format!(
                "{} densities do not match {} edges",
                densities.len(),
                bin_edges.len()
            )));
        }
        for pair in bin_edges.windows(2) {
            if !(pair[1] > pair[0]) || !pair[0].is_finite() || !pair[1].is_finite() {
                return Err(DetectorError::InvalidDistribution(
                    "bin edges must be finite and strictly increasing".into(),
                ));
            }
        }
        if densities.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(DetectorError::InvalidDistribution(
                "densities must be finite and non-negative".into(),
            ));
        }
        let integral: f64 = densities
            .iter()
            .zip(bin_edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum();
        if (integral - 1.0).abs() > 1e-9 {
            return Err(DetectorError::InvalidDistribution(format!(
                "densities integrate to {integral}, expected 1"
            )));
        }
        Ok(EmpiricalDistribution {
            observable,
            class,
            bin_edges,
            densities,
        })
    }

    #[cfg(test)]
    pub(crate) fn from_parts_unchecked(
        observable: ObservableKind,
        class: CoverageState,
        bin_edges: Vec<f64>,
        densities: Vec<f64>,
    ) -> Self {
        EmpiricalDistribution {
            observable,
            class,
            bin_edges,
            densities,
        }
    }

    pub fn observable(&self) -> ObservableKind {
        self.observable
    }

    pub fn class(&self) -> CoverageState {
        self.class
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn support(&self) -> (f64, f64) {
        (self.bin_edges[0], *self.bin_edges.last().unwrap())
    }

    fn bin_index(&self, value: f64) -> Option<usize> {
        let (lo, hi) = self.support();
        if !(value >= lo && value <= hi) {
            return None;
        }
        if value == hi {
            return Some(self.densities.len() - 1);
        }
        let idx = self.bin_edges.partition_point(|e| *e <= value);
        Some(idx - 1)
    }

    /// Density at `value`; `floor` outside the support.
    pub fn density_at(&self, value: f64, floor: f64) -> f64 {
        match self.bin_index(value) {
            Some(i) => self.densities[i],
            None => floor,
        }
    }

    /// Piecewise-linear cumulative distribution implied by the bins.
    pub fn cdf(&self, value: f64) -> f64 {
        let (lo, hi) = self.support();
        if value <= lo {
            return 0.0;
        }
        if value >= hi {
            return 1.0;
        }
        let mut acc = 0.0;
        for (d, e) in self.densities.iter().zip(self.bin_edges.windows(2)) {
            if value >= e[1] {
                acc += d * (e[1] - e[0]);
            } else {
                acc += d * (value - e[0]);
                break;
            }
        }
        acc
    }

    /// Draws a value: a bin chosen by probability mass, uniform within it.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let total: f64 = self
            .densities
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = self.densities.len() - 1;
        for (i, (d, e)) in self
            .densities
            .iter()
            .zip(self.bin_edges.windows(2))
            .enumerate()
        {
            target -= d * (e[1] - e[0]);
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        let lo = self.bin_edges[chosen];
        let hi = self.bin_edges[chosen + 1];
        lo + rng.random::<f64>() * (hi - lo)
    }
}

/// Floors every bin to `floor` and rescales the remaining bins so the
/// density still integrates to 1 and floored bins sit exactly at the floor.
fn floor_and_normalize(
    densities: &mut [f64],
    edges: &[f64],
    floor: f64,
) -> Result<(), DetectorError> {
    let widths: Vec<f64> = edges.windows(2).map(|e| e[1] - e[0]).collect();
    let mut pinned = vec![false; densities.len()];
    loop {
        let mut changed = false;
        for (i, d) in densities.iter_mut().enumerate() {
            if !pinned[i] && *d < floor {
                *d = floor;
                pinned[i] = true;
                changed = true;
            }
        }
        let pinned_mass: f64 = pinned
            .iter()
            .zip(&widths)
            .filter(|(p, _)| **p)
            .map(|(_, w)| floor * w)
            .sum();
        if pinned_mass >= 1.0 {
            return Err(DetectorError::InvalidDistribution(format!(
                "smoothing floor {floor} too large for the binning"
            )));
        }
        let free_mass: f64 = densities
            .iter()
            .zip(&widths)
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|((d, w), _)| d * w)
            .sum();
        if free_mass <= 0.0 {
            return Err(DetectorError::InvalidDistribution(
                "no probability mass outside floored bins".into(),
            ));
        }
        let scale = (1.0 - pinned_mass) / free_mass;
        for (i, d) in densities.iter_mut().enumerate() {
            if !pinned[i] {
                *d *= scale;
            }
        }
        if !changed && (scale - 1.0).abs() < 1e-12 {
            break;
        }
        if !changed {
            // one clean rescale after the last pinning pass
            let all_ok = densities
                .iter()
                .zip(&pinned)
                .all(|(d, p)| *p || *d >= floor);
            if all_ok {
                break;
            }
        }
    }
    Ok(())
}

/// Histogram density estimate over `binning`, floored and renormalized.
/// Samples outside the binning range are clamped into the edge bins.
pub fn fit_empirical_pdf(
    samples: &[f64],
    class: CoverageState,
    observable: ObservableKind,
    binning: &BinningPolicy,
    smoothing_floor: f64,
) -> Result<EmpiricalDistribution, DetectorError> {
    binning.validate()?;
    if samples.len() < 10 {
        return Err(DetectorError::InsufficientData {
            reason: format!(
                "need at least 10 {observable} samples for class {class}, got {}",
                samples.len()
            ),
        });
    }
    if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
        return Err(DetectorError::InsufficientData {
            reason: format!("non-finite {observable} sample {bad}"),
        });
    }
    let first = samples[0];
    if samples.iter().all(|s| *s == first) {
        return Err(DetectorError::DegenerateSupport);
    }
    let edges = binning.edges();
    let mut counts = vec![0u64; binning.bins];
    for &v in samples {
        let idx = if v <= edges[0] {
            0
        } else if v >= edges[binning.bins] {
            binning.bins - 1
        } else {
            edges.partition_point(|e| *e <= v) - 1
        };
        counts[idx] += 1;
    }
    let n = samples.len() as f64;
    let mut densities: Vec<f64> = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(c, e)| *c as f64 / (n * (e[1] - e[0])))
        .collect();
    floor_and_normalize(&mut densities, &edges, smoothing_floor)?;
    EmpiricalDistribution::from_parts(observable, class, edges, densities)
}

/// Result of the log-normal CDF fit behind [`fit_radius_model`].
#[derive(Debug, Clone, Copy)]
pub struct RadiusFit {
    /// Location of the fitted log-normal (mean of ln radius).
    pub mu: f64,
    /// Scale of the fitted log-normal (std dev of ln radius).
    pub sigma: f64,
    /// Count-weighted RMS residual between fitted and empirical CDF.
    pub rms_residual: f64,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Least-squares fit of a log-normal CDF to the quantized empirical radius
/// CDF: a probit-scale weighted linear regression provides the starting
/// point, then Gauss-Newton refines the CDF residuals directly.
fn fit_lognormal_cdf(levels: &[f64], counts: &[u64]) -> Result<RadiusFit, DetectorError> {
    let n: u64 = counts.iter().sum();
    let nf = n as f64;
    let norm = standard_normal();

    // midpoint plotting positions keep probits finite at both ends
    let mut cum = 0u64;
    let mut xs = Vec::with_capacity(levels.len());
    let mut fs = Vec::with_capacity(levels.len());
    let mut ws = Vec::with_capacity(levels.len());
    for (level, count) in levels.iter().zip(counts) {
        cum += count;
        xs.push(level.ln());
        fs.push((cum as f64 - 0.5 * *count as f64) / nf);
        ws.push(*count as f64);
    }
    let ys: Vec<f64> = fs.iter().map(|f| norm.inverse_cdf(*f)).collect();

    let wsum: f64 = ws.iter().sum();
    let xbar = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / wsum;
    let ybar = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let sxx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - xbar).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .zip(&ws)
        .map(|((x, y), w)| w * (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(DetectorError::FitDiverged {
            residual: f64::INFINITY,
            limit: RADIUS_FIT_RMS_LIMIT,
        });
    }
    let mut sigma = 1.0 / slope;
    let mut mu = xbar - sigma * ybar;

    let sse = |mu: f64, sigma: f64| -> f64 {
        xs.iter()
            .zip(&fs)
            .zip(&ws)
            .map(|((x, f), w)| {
                let r = norm.cdf((x - mu) / sigma) - f;
                w * r * r
            })
            .sum()
    };
    let mut best = sse(mu, sigma);

    for _ in 0..30 {
        // normal equations of the 2-parameter Gauss-Newton step
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((x, f), w) in xs.iter().zip(&fs).zip(&ws) {
            let t = (x - mu) / sigma;
            let phi = normal_pdf(t);
            let jm = -phi / sigma;
            let js = -t * phi / sigma;
            let r = norm.cdf(t) - f;
            a11 += w * jm * jm;
            a12 += w * jm * js;
            a22 += w * js * js;
            b1 += w * jm * r;
            b2 += w * js * r;
        }
        a11 += 1e-12;
        a22 += 1e-12;
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-300 {
            break;
        }
        let dmu = (-b1 * a22 + b2 * a12) / det;
        let dsigma = (-a11 * b2 + a12 * b1) / det;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..10 {
            let cand_mu = mu + step * dmu;
            let cand_sigma = sigma + step * dsigma;
            if cand_sigma > 1e-9 {
                let cand = sse(cand_mu, cand_sigma);
                if cand < best {
                    mu = cand_mu;
                    sigma = cand_sigma;
                    improved = true;
                    let gain = best - cand;
                    best = cand;
                    if gain < 1e-14 {
                        return Ok(RadiusFit {
                            mu,
                            sigma,
                            rms_residual: (best / wsum).sqrt(),
                        });
                    }
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(RadiusFit {
        mu,
        sigma,
        rms_residual: (best / wsum).sqrt(),
    })
}

/// Fits a smooth log-normal CDF to the quantized empirical radius CDF by
/// least squares and discretizes its density onto `binning`. Tail mass
/// outside the binning range is folded into the edge bins.
pub fn fit_radius_model(
    samples: &[f64],
    class: CoverageState,
    binning: &BinningPolicy,
    smoothing_floor: f64,
) -> Result<EmpiricalDistribution, DetectorError> {
    binning.validate()?;
    if samples.len() < 10 {
        return Err(DetectorError::InsufficientData {
            reason: format!(
                "need at least 10 radius samples for class {class}, got {}",
                samples.len()
            ),
        });
    }
    if let Some(bad) = samples.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(DetectorError::InsufficientData {
            reason: format!("radius sample {bad} must be positive and finite"),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut levels: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for v in sorted {
        if levels.last() == Some(&v) {
            *counts.last_mut().unwrap() += 1;
        } else {
            levels.push(v);
            counts.push(1);
        }
    }
    if levels.len() < 2 {
        return Err(DetectorError::DegenerateSupport);
    }

    let fit = fit_lognormal_cdf(&levels, &counts)?;
    if fit.rms_residual > RADIUS_FIT_RMS_LIMIT {
        return Err(DetectorError::FitDiverged {
            residual: fit.rms_residual,
            limit: RADIUS_FIT_RMS_LIMIT,
        });
    }

    let lognormal = LogNormal::new(fit.mu, fit.sigma).map_err(|e| {
        DetectorError::InvalidDistribution(format!("fitted log-normal invalid: {e}"))
    })?;
    let edges = binning.edges();
    let mut densities = Vec::with_capacity(binning.bins);
    for (i, e) in edges.windows(2).enumerate() {
        let mut mass = lognormal.cdf(e[1]) - lognormal.cdf(e[0]);
        if i == 0 {
            mass += lognormal.cdf(e[0]);
        }
        if i == binning.bins - 1 {
            mass += 1.0 - lognormal.cdf(e[1]);
        }
        densities.push(mass.max(0.0) / (e[1] - e[0]));
    }
    floor_and_normalize(&mut densities, &edges, smoothing_floor)?;
    EmpiricalDistribution::from_parts(ObservableKind::Radius, class, edges, densities)
}

// ---------------------------------------------------------------------------
// Observations and classification
// ---------------------------------------------------------------------------

/// Per-observable class weights, normalized across the two classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub indoor: f64,
    pub outdoor: f64,
}

impl Observation {
    pub const UNIFORM: Observation = Observation {
        indoor: 0.5,
        outdoor: 0.5,
    };

    pub fn weight(&self, state: CoverageState) -> f64 {
        match state {
            CoverageState::Indoor => self.indoor,
            CoverageState::Outdoor => self.outdoor,
        }
    }
}

/// Looks up the density of `value` under both class distributions (floored
/// outside the support) and normalizes across the two classes.
pub fn observe(
    dist_indoor: &EmpiricalDistribution,
    dist_outdoor: &EmpiricalDistribution,
    value: f64,
    smoothing_floor: f64,
) -> Observation {
    debug_assert_eq!(dist_indoor.observable(), dist_outdoor.observable());
    let p_in = dist_indoor.density_at(value, smoothing_floor);
    let p_out = dist_outdoor.density_at(value, smoothing_floor);
    let total = p_in + p_out;
    Observation {
        indoor: p_in / total,
        outdoor: p_out / total,
    }
}

/// Which observations enter the fused product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Fused,
    PowerOnly,
}

/// The four fitted class-conditional distributions plus the smoothing floor.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    power_indoor: EmpiricalDistribution,
    power_outdoor: EmpiricalDistribution,
    radius_indoor: EmpiricalDistribution,
    radius_outdoor: EmpiricalDistribution,
    smoothing_floor: f64,
}

/// Fit configuration for [`DetectorModel::fit`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub power_binning: BinningPolicy,
    pub radius_binning: BinningPolicy,
    pub smoothing_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            power_binning: BinningPolicy::power_default(),
            radius_binning: BinningPolicy::radius_default(),
            smoothing_floor: DEFAULT_SMOOTHING_FLOOR,
        }
    }
}

impl DetectorModel {
    pub fn new(
        power_indoor: EmpiricalDistribution,
        power_outdoor: EmpiricalDistribution,
        radius_indoor: EmpiricalDistribution,
        radius_outdoor: EmpiricalDistribution,
        smoothing_floor: f64,
    ) -> Result<Self, DetectorError> {
        let expect = |d: &EmpiricalDistribution, obs: ObservableKind, class: CoverageState| {
            if d.observable() != obs || d.class() != class {
                Err(DetectorError::InvalidModel(format!(
                    "expected ({obs}, {class}) distribution, got ({}, {})",
                    d.observable(),
                    d.class()
                )))
            } else {
                Ok(())
            }
        };
        expect(&power_indoor, ObservableKind::Power, CoverageState::Indoor)?;
        expect(&power_outdoor, ObservableKind::Power, CoverageState::Outdoor)?;
        expect(&radius_indoor, ObservableKind::Radius, CoverageState::Indoor)?;
        expect(&radius_outdoor, ObservableKind::Radius, CoverageState::Outdoor)?;
        if !(smoothing_floor > 0.0 && smoothing_floor.is_finite()) {
            return Err(DetectorError::InvalidModel(format!(
                "smoothing floor {smoothing_floor} must be positive"
            )));
        }
        Ok(DetectorModel {
            power_indoor,
            power_outdoor,
            radius_indoor,
            radius_outdoor,
            smoothing_floor,
        })
    }

    /// Fits all four class-conditional distributions from labeled traces.
    pub fn fit(traces: &[Trace], options: &FitOptions) -> Result<Self, DetectorError> {
        let mut power = [Vec::new(), Vec::new()];
        let mut radius = [Vec::new(), Vec::new()];
        for trace in traces {
            for s in trace.samples() {
                let k = match s.truth {
                    CoverageState::Indoor => 0,
                    CoverageState::Outdoor => 1,
                };
                power[k].push(s.power_dbm);
                radius[k].push(s.confidence_radius_m);
            }
        }
        for (k, class) in CoverageState::ALL.iter().enumerate() {
            if power[k].len() < 10 {
                return Err(DetectorError::InsufficientData {
                    reason: format!(
                        "class {class} has {} labeled samples, need at least 10",
                        power[k].len()
                    ),
                });
            }
        }
        let floor = options.smoothing_floor;
        DetectorModel::new(
            fit_empirical_pdf(
                &power[0],
                CoverageState::Indoor,
                ObservableKind::Power,
                &options.power_binning,
                floor,
            )?,
            fit_empirical_pdf(
                &power[1],
                CoverageState::Outdoor,
                ObservableKind::Power,
                &options.power_binning,
                floor,
            )?,
            fit_radius_model(&radius[0], CoverageState::Indoor, &options.radius_binning, floor)?,
            fit_radius_model(&radius[1], CoverageState::Outdoor, &options.radius_binning, floor)?,
            floor,
        )
    }

    pub fn smoothing_floor(&self) -> f64 {
        self.smoothing_floor
    }

    pub fn power_distribution(&self, class: CoverageState) -> &EmpiricalDistribution {
        match class {
            CoverageState::Indoor => &self.power_indoor,
            CoverageState::Outdoor => &self.power_outdoor,
        }
    }

    pub fn radius_distribution(&self, class: CoverageState) -> &EmpiricalDistribution {
        match class {
            CoverageState::Indoor => &self.radius_indoor,
            CoverageState::Outdoor => &self.radius_outdoor,
        }
    }

    pub fn observe_power(&self, power_dbm: f64) -> Observation {
        observe(
            &self.power_indoor,
            &self.power_outdoor,
            power_dbm,
            self.smoothing_floor,
        )
    }

    pub fn observe_radius(&self, radius_m: f64) -> Observation {
        observe(
            &self.radius_indoor,
            &self.radius_outdoor,
            radius_m,
            self.smoothing_floor,
        )
    }

    /// Serializes the model to the self-describing JSON format. The float
    /// encoding round-trips bit-exactly.
    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            smoothing_floor: self.smoothing_floor,
            power_indoor: self.power_indoor.clone(),
            power_outdoor: self.power_outdoor.clone(),
            radius_indoor: self.radius_indoor.clone(),
            radius_outdoor: self.radius_outdoor.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn from_json_str(json: &str) -> Result<Self, DetectorError> {
        let file: ModelFile =
            serde_json::from_str(json).map_err(|e| DetectorError::ModelFormat(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(DetectorError::ModelFormat(format!(
                "unknown format {:?}",
                file.format
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(DetectorError::ModelFormat(format!(
                "unsupported version {}",
                file.version
            )));
        }
        DetectorModel::new(
            file.power_indoor,
            file.power_outdoor,
            file.radius_indoor,
            file.radius_outdoor,
            file.smoothing_floor,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let text = std::fs::read_to_string(path)?;
        DetectorModel::from_json_str(&text)
    }
}

const MODEL_FORMAT: &str = "iobba-detector-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    smoothing_floor: f64,
    power_indoor: EmpiricalDistribution,
    power_outdoor: EmpiricalDistribution,
    radius_indoor: EmpiricalDistribution,
    radius_outdoor: EmpiricalDistribution,
}

/// MAP classification with uniform priors: argmax over the product of the
/// normalized per-observable observations, ties to Indoor. The second value
/// is the winning class's normalized posterior weight.
pub fn map_classify(model: &DetectorModel, power_dbm: f64, radius_m: f64) -> (CoverageState, f64) {
    map_classify_mode(model, power_dbm, radius_m, FusionMode::Fused)
}

/// [`map_classify`] with a selectable fusion mode. `PowerOnly` forces the
/// radius observation to be uniform, reducing to single-sensor detection.
pub fn map_classify_mode(
    model: &DetectorModel,
    power_dbm: f64,
    radius_m: f64,
    mode: FusionMode,
) -> (CoverageState, f64) {
    let obs_power = model.observe_power(power_dbm);
    let obs_radius = match mode {
        FusionMode::Fused => model.observe_radius(radius_m),
        FusionMode::PowerOnly => Observation::UNIFORM,
    };
    let w_in = obs_power.indoor * obs_radius.indoor;
    let w_out = obs_power.outdoor * obs_radius.outdoor;
    let total = w_in + w_out;
    if w_in >= w_out {
        (CoverageState::Indoor, w_in / total)
    } else {
        (CoverageState::Outdoor, w_out / total)
    }
}

/// Per-sample classification over a whole trace.
pub fn detect_series(model: &DetectorModel, trace: &Trace) -> Vec<(f64, CoverageState)> {
    detect_series_mode(model, trace, FusionMode::Fused)
}

pub fn detect_series_mode(
    model: &DetectorModel,
    trace: &Trace,
    mode: FusionMode,
) -> Vec<(f64, CoverageState)> {
    trace
        .samples()
        .iter()
        .map(|s| {
            let (state, _) = map_classify_mode(model, s.power_dbm, s.confidence_radius_m, mode);
            (s.timestamp_s, state)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Confusion matrix
// ---------------------------------------------------------------------------

/// 2x2 counts indexed by (detected, true) coverage state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; 2]; 2],
}

fn state_index(state: CoverageState) -> usize {
    match state {
        CoverageState::Indoor => 0,
        CoverageState::Outdoor => 1,
    }
}

impl ConfusionMatrix {
    pub fn count(&self, detected: CoverageState, truth: CoverageState) -> u64 {
        self.counts[state_index(detected)][state_index(truth)]
    }

    /// Column-normalized probability P(detected | true). NaN for a truth
    /// class that never occurs.
    pub fn probability(&self, detected: CoverageState, truth: CoverageState) -> f64 {
        let t = state_index(truth);
        let column: u64 = self.counts[0][t] + self.counts[1][t];
        self.counts[state_index(detected)][t] as f64 / column as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Diagonal mass over the total: the fraction of correct detections.
    pub fn accuracy(&self) -> f64 {
        (self.counts[0][0] + self.counts[1][1]) as f64 / self.total() as f64
    }

    /// Recall of one class: P(detected == class | true == class).
    pub fn recall(&self, class: CoverageState) -> f64 {
        self.probability(class, class)
    }
}

/// Builds the confusion matrix of `predicted` against `truth`.
pub fn confusion_matrix(
    predicted: &[CoverageState],
    truth: &[CoverageState],
) -> Result<ConfusionMatrix, DetectorError> {
    if predicted.len() != truth.len() {
        return Err(DetectorError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(DetectorError::Empty);
    }
    let mut counts = [[0u64; 2]; 2];
    for (p, t) in predicted.iter().zip(truth) {
        counts[state_index(*p)][state_index(*t)] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    #[test]
    fn uniform_samples_give_flat_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..1000)
            .map(|_| -100.0 + 10.0 * rng.random::<f64>())
            .collect();
        let binning = BinningPolicy {
            lo: -100.0,
            hi: -90.0,
            bins: 10,
            scale: BinScale::Linear,
        };
        let dist = fit_empirical_pdf(
            &samples,
            CoverageState::Outdoor,
            ObservableKind::Power,
            &binning,
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap();
        for (i, d) in dist.densities().iter().enumerate() {
            assert!(
                (d - 0.1).abs() / 0.1 < 0.2,
                "bin {i} density {d} deviates more than 20% from 0.1"
            );
        }
    }

    #[test]
    fn all_equal_samples_are_degenerate() {
        let samples = vec![-95.0; 50];
        let err = fit_empirical_pdf(
            &samples,
            CoverageState::Indoor,
            ObservableKind::Power,
            &BinningPolicy::power_default(),
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap_err();
        assert!(matches!(err, DetectorError::DegenerateSupport));
    }

    #[test]
    fn too_few_samples_are_insufficient() {
        let samples = vec![-95.0, -96.0, -97.0];
        let err = fit_empirical_pdf(
            &samples,
            CoverageState::Indoor,
            ObservableKind::Power,
            &BinningPolicy::power_default(),
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap_err();
        assert!(matches!(err, DetectorError::InsufficientData { .. }));
    }

    #[test]
    fn empty_interior_bin_sits_exactly_at_the_floor() {
        // mass only in the first and last of three bins
        let samples: Vec<f64> = (0..20)
            .map(|i| if i % 2 == 0 { 0.5 } else { 2.5 })
            .collect();
        let binning = BinningPolicy {
            lo: 0.0,
            hi: 3.0,
            bins: 3,
            scale: BinScale::Linear,
        };
        let dist = fit_empirical_pdf(
            &samples,
            CoverageState::Indoor,
            ObservableKind::Power,
            &binning,
            1e-6,
        )
        .unwrap();
        assert_eq!(dist.densities()[1], 1e-6);
        let integral: f64 = dist
            .densities()
            .iter()
            .zip(dist.bin_edges().windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum();
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn radius_fit_recovers_the_generator_cdf() {
        // log-normal(mu=2, sigma=0.5) quantized to integers; the fitted CDF
        // must stay within Kolmogorov distance 0.05 of the true one.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gen = rand_distr::LogNormal::<f64>::new(2.0, 0.5).unwrap();
        let samples: Vec<f64> = (0..4000)
            .map(|_| gen.sample(&mut rng).round().max(1.0))
            .collect();
        let dist = fit_radius_model(
            &samples,
            CoverageState::Indoor,
            &BinningPolicy::radius_default(),
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap();
        let truth = LogNormal::new(2.0, 0.5).unwrap();
        let mut worst = 0.0f64;
        for i in 0..=490 {
            let x = 1.0 + 0.1 * i as f64;
            let d = (dist.cdf(x) - truth.cdf(x)).abs();
            worst = worst.max(d);
        }
        assert!(worst <= 0.05, "Kolmogorov distance {worst} > 0.05");
    }

    #[test]
    fn radius_fit_accepts_two_levels() {
        let mut samples = vec![4.0; 30];
        samples.extend(vec![16.0; 30]);
        let dist = fit_radius_model(
            &samples,
            CoverageState::Outdoor,
            &BinningPolicy::radius_default(),
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap();
        // valid monotone CDF over the support
        let mut prev = 0.0;
        for i in 0..=100 {
            let x = 1.0 + 199.0 * i as f64 / 100.0;
            let c = dist.cdf(x);
            assert!(c >= prev - 1e-12);
            prev = c;
        }
        assert!((dist.cdf(200.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn radius_fit_rejects_non_positive_samples() {
        let mut samples = vec![4.0; 20];
        samples.push(-1.0);
        let err = fit_radius_model(
            &samples,
            CoverageState::Indoor,
            &BinningPolicy::radius_default(),
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap_err();
        assert!(matches!(err, DetectorError::InsufficientData { .. }));
    }

    #[test]
    fn radius_fit_single_level_is_degenerate() {
        let samples = vec![8.0; 40];
        let err = fit_radius_model(
            &samples,
            CoverageState::Indoor,
            &BinningPolicy::radius_default(),
            DEFAULT_SMOOTHING_FLOOR,
        )
        .unwrap_err();
        assert!(matches!(err, DetectorError::DegenerateSupport));
    }

    fn dist2(
        observable: ObservableKind,
        class: CoverageState,
        d0: f64,
        d1: f64,
    ) -> EmpiricalDistribution {
        EmpiricalDistribution::from_parts(observable, class, vec![0.0, 1.0, 2.0], vec![d0, d1])
            .unwrap()
    }

    #[test]
    fn observation_examples() {
        // equal densities -> (0.5, 0.5)
        let din = dist2(ObservableKind::Power, CoverageState::Indoor, 0.4, 0.6);
        let dout = dist2(ObservableKind::Power, CoverageState::Outdoor, 0.4, 0.6);
        let o = observe(&din, &dout, 0.5, 1e-6);
        assert_eq!(o.indoor, 0.5);
        assert_eq!(o.outdoor, 0.5);

        // outside both supports -> floor/floor -> (0.5, 0.5)
        let o = observe(&din, &dout, 10.0, 1e-6);
        assert_eq!(o.indoor, 0.5);

        // densities 0.03 vs 0.01 -> (0.75, 0.25)
        let din = dist2(ObservableKind::Power, CoverageState::Indoor, 0.03, 0.97);
        let dout = dist2(ObservableKind::Power, CoverageState::Outdoor, 0.01, 0.99);
        let o = observe(&din, &dout, 0.5, 1e-6);
        assert!((o.indoor - 0.75).abs() < 1e-12);
        assert!((o.outdoor - 0.25).abs() < 1e-12);
    }

    fn toy_model(py: (f64, f64), pz: (f64, f64)) -> DetectorModel {
        // at value 0.5 the power observation is (py.0, py.1) and the radius
        // observation is (pz.0, pz.1), both already normalized
        DetectorModel::new(
            dist2(ObservableKind::Power, CoverageState::Indoor, py.0, 1.0 - py.0),
            dist2(ObservableKind::Power, CoverageState::Outdoor, py.1, 1.0 - py.1),
            dist2(ObservableKind::Radius, CoverageState::Indoor, pz.0, 1.0 - pz.0),
            dist2(ObservableKind::Radius, CoverageState::Outdoor, pz.1, 1.0 - pz.1),
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn map_classify_product_and_normalize() {
        // obs_y = (0.8, 0.2), obs_z = (0.6, 0.4) -> Indoor with 0.48/0.56
        let model = toy_model((0.8, 0.2), (0.6, 0.4));
        let (state, weight) = map_classify(&model, 0.5, 0.5);
        assert_eq!(state, CoverageState::Indoor);
        assert!((weight - 0.48 / 0.56).abs() < 1e-12, "{weight}");

        // exact tie goes to Indoor at weight 0.5
        let model = toy_model((0.5, 0.5), (0.5, 0.5));
        let (state, weight) = map_classify(&model, 0.5, 0.5);
        assert_eq!(state, CoverageState::Indoor);
        assert_eq!(weight, 0.5);

        // both factors favor Outdoor
        let model = toy_model((0.1, 0.9), (0.2, 0.8));
        let (state, _) = map_classify(&model, 0.5, 0.5);
        assert_eq!(state, CoverageState::Outdoor);
    }

    #[test]
    fn classification_is_invariant_under_density_rescaling() {
        // scaling both class densities of one observable by the same factor
        // leaves the decision unchanged (within the shared support)
        let model = toy_model((0.7, 0.4), (0.3, 0.6));
        let scale = 37.5;
        let scaled = DetectorModel {
            power_indoor: EmpiricalDistribution::from_parts_unchecked(
                ObservableKind::Power,
                CoverageState::Indoor,
                model.power_indoor.bin_edges().to_vec(),
                model.power_indoor.densities().iter().map(|d| d * scale).collect(),
            ),
            power_outdoor: EmpiricalDistribution::from_parts_unchecked(
                ObservableKind::Power,
                CoverageState::Outdoor,
                model.power_outdoor.bin_edges().to_vec(),
                model.power_outdoor.densities().iter().map(|d| d * scale).collect(),
            ),
            radius_indoor: model.radius_indoor.clone(),
            radius_outdoor: model.radius_outdoor.clone(),
            smoothing_floor: model.smoothing_floor,
        };
        for i in 0..40 {
            let v = 0.05 * i as f64; // inside [0, 2)
            let r = 0.05 * i as f64;
            let (a, _) = map_classify(&model, v, r);
            let (b, _) = map_classify(&scaled, v, r);
            assert_eq!(a, b, "decision changed at ({v}, {r})");
        }
    }

    #[test]
    fn uniform_radius_reduces_fusion_to_power_only() {
        // identical radius distributions for both classes make the radius
        // observation uniform, so fused == power-only everywhere
        let model = toy_model((0.7, 0.4), (0.5, 0.5));
        for i in 0..60 {
            let v = -0.5 + 0.05 * i as f64;
            let fused = map_classify_mode(&model, v, 0.5, FusionMode::Fused);
            let power = map_classify_mode(&model, v, 0.5, FusionMode::PowerOnly);
            assert_eq!(fused.0, power.0);
            assert!((fused.1 - power.1).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_matrix_examples() {
        use CoverageState::{Indoor, Outdoor};
        // perfect predictor
        let truth = vec![Indoor, Outdoor, Indoor, Outdoor];
        let m = confusion_matrix(&truth, &truth).unwrap();
        assert_eq!(m.probability(Indoor, Indoor), 1.0);
        assert_eq!(m.probability(Outdoor, Indoor), 0.0);
        assert_eq!(m.accuracy(), 1.0);

        // constant-Indoor predictor on a half/half truth
        let predicted = vec![Indoor; 4];
        let m = confusion_matrix(&predicted, &truth).unwrap();
        assert_eq!(m.probability(Indoor, Indoor), 1.0);
        assert_eq!(m.probability(Indoor, Outdoor), 1.0);
        assert_eq!(m.probability(Outdoor, Outdoor), 0.0);
        assert_eq!(m.accuracy(), 0.5);

        // probability columns sum to 1
        for truth_class in CoverageState::ALL {
            let col: f64 = CoverageState::ALL
                .iter()
                .map(|d| m.probability(*d, truth_class))
                .sum();
            assert!((col - 1.0).abs() < 1e-9);
        }

        assert!(matches!(
            confusion_matrix(&predicted[..2], &truth),
            Err(DetectorError::LengthMismatch { .. })
        ));
        assert!(matches!(confusion_matrix(&[], &[]), Err(DetectorError::Empty)));
    }

    #[test]
    fn model_json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal_in = rand_distr::Normal::new(-105.0, 5.0).unwrap();
        let normal_out = rand_distr::Normal::new(-85.0, 5.0).unwrap();
        let ln_in = rand_distr::LogNormal::<f64>::new(3.5, 0.5).unwrap();
        let ln_out = rand_distr::LogNormal::<f64>::new(1.5, 0.4).unwrap();
        let pi: Vec<f64> = (0..500).map(|_| normal_in.sample(&mut rng)).collect();
        let po: Vec<f64> = (0..500).map(|_| normal_out.sample(&mut rng)).collect();
        let ri: Vec<f64> = (0..500).map(|_| ln_in.sample(&mut rng).round().max(1.0)).collect();
        let ro: Vec<f64> = (0..500).map(|_| ln_out.sample(&mut rng).round().max(1.0)).collect();
        let opts = FitOptions::default();
        let model = DetectorModel::new(
            fit_empirical_pdf(&pi, CoverageState::Indoor, ObservableKind::Power, &opts.power_binning, opts.smoothing_floor).unwrap(),
            fit_empirical_pdf(&po, CoverageState::Outdoor, ObservableKind::Power, &opts.power_binning, opts.smoothing_floor).unwrap(),
            fit_radius_model(&ri, CoverageState::Indoor, &opts.radius_binning, opts.smoothing_floor).unwrap(),
            fit_radius_model(&ro, CoverageState::Outdoor, &opts.radius_binning, opts.smoothing_floor).unwrap(),
            opts.smoothing_floor,
        )
        .unwrap();
        let json = model.to_json_string();
        let back = DetectorModel::from_json_str(&json).unwrap();
        assert_eq!(model, back);
        assert_eq!(json, back.to_json_string());
    }

    #[test]
    fn model_rejects_mismatched_distributions() {
        let p = dist2(ObservableKind::Power, CoverageState::Indoor, 0.5, 0.5);
        let r = dist2(ObservableKind::Radius, CoverageState::Indoor, 0.5, 0.5);
        let err = DetectorModel::new(p.clone(), p.clone(), r.clone(), r, 1e-6).unwrap_err();
        assert!(matches!(err, DetectorError::InvalidModel(_)));
    }

    #[test]
    fn sampling_respects_bin_masses() {
        let d = dist2(ObservableKind::Power, CoverageState::Indoor, 0.9, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let in_first = (0..n)
            .filter(|_| {
                let v = d.sample(&mut rng);
                (0.0..1.0).contains(&v)
            })
            .count();
        let frac = in_first as f64 / n as f64;
        assert!((frac - 0.9).abs() < 0.01, "{frac}");
    }
}
