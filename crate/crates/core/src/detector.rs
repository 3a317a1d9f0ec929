//! Error scoring, threshold rules and evaluation.
//!
//! Absolute forecast errors are normalized per sensor with the median and
//! IQR of the validation errors. Three rules turn normalized errors into
//! flags:
//!
//! - global: tick `t` is anomalous when `max_i ε̃_{i,t}` exceeds the largest
//!   validation score `κ`;
//! - per-sensor: sensor `i` is anomalous at `t` when `ε̃_{i,t}` exceeds
//!   `κ_i`, the `τ`-th percentile of validation scores pooled over the
//!   in-neighborhood of `i`;
//! - positivity: the per-sensor rule, additionally flagging any negative raw
//!   reading.
//!
//! All comparisons are strict.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gdn::Adjacency;
use crate::linalg::Matrix;
use crate::series::MultivariateSeries;
use crate::stats;

pub const DEFAULT_IQR_FLOOR: f64 = 1e-2;
pub const DEFAULT_TAU: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DetectorConfig {
    pub iqr_floor: f64,
    /// Percentile for the per-sensor rule, in `(0, 100]`.
    pub tau: f64,
    /// Trailing moving-average length for the global rule; `None` is off.
    pub sma_window: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            iqr_floor: DEFAULT_IQR_FLOOR,
            tau: DEFAULT_TAU,
            sma_window: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iqr_floor > 0.0 && self.iqr_floor.is_finite()) {
            return Err(Error::param(
                "iqr_floor",
                format!("must be > 0, got {}", self.iqr_floor),
            ));
        }
        check_tau(self.tau)?;
        if self.sma_window == Some(0) {
            return Err(Error::param("sma_window", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 100.0) {
        return Err(Error::param("tau", format!("must lie in (0, 100], got {tau}")));
    }
    Ok(())
}

/// `|y − ŷ|` element-wise.
pub fn compute_errors(predictions: &Matrix, actuals: &Matrix) -> Result<Matrix> {
    if predictions.shape() != actuals.shape() {
        return Err(Error::ShapeMismatch {
            op: "compute_errors",
            left: predictions.shape(),
            right: actuals.shape(),
        });
    }
    let data = predictions
        .as_slice()
        .iter()
        .zip(actuals.as_slice())
        .map(|(p, a)| libm::fabs(a - p))
        .collect();
    Matrix::from_vec(predictions.rows(), predictions.cols(), data)
}

/// Per-sensor median and IQR of validation errors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
    pub iqr_floor: f64,
}

pub fn fit_norm_stats(val_errors: &Matrix, iqr_floor: f64) -> Result<NormStats> {
    if val_errors.rows() == 0 {
        return Err(Error::EmptyValidation);
    }
    let mut median = Vec::with_capacity(val_errors.cols());
    let mut iqr = Vec::with_capacity(val_errors.cols());
    for i in 0..val_errors.cols() {
        let col = val_errors.col(i);
        median.push(stats::median(&col).ok_or(Error::NonFinite("validation errors"))?);
        iqr.push(stats::iqr(&col).ok_or(Error::NonFinite("validation errors"))?);
    }
    Ok(NormStats {
        median,
        iqr,
        iqr_floor,
    })
}

/// `(ε − median_i) / max(IQR_i, iqr_floor)` per sensor.
pub fn robust_normalize(errors: &Matrix, stats: &NormStats) -> Result<Matrix> {
    let n = errors.cols();
    if stats.median.len() < n || stats.iqr.len() < n {
        return Err(Error::MissingSensorStats(stats.median.len().min(stats.iqr.len())));
    }
    let mut out = errors.clone();
    for t in 0..out.rows() {
        for (i, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = (*v - stats.median[i]) / stats.iqr[i].max(stats.iqr_floor);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ErrorSource {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorScores {
    pub raw: Matrix,
    pub normalized: Matrix,
    pub stats: NormStats,
    pub source: ErrorSource,
}

/// Scores validation errors against their own statistics and test errors
/// against the same statistics.
pub fn score_errors(
    val_raw: Matrix,
    test_raw: Matrix,
    iqr_floor: f64,
) -> Result<(ErrorScores, ErrorScores)> {
    if val_raw.cols() != test_raw.cols() {
        return Err(Error::LengthMismatch {
            expected: val_raw.cols(),
            found: test_raw.cols(),
        });
    }
    let stats = fit_norm_stats(&val_raw, iqr_floor)?;
    let val_norm = robust_normalize(&val_raw, &stats)?;
    let test_norm = robust_normalize(&test_raw, &stats)?;
    Ok((
        ErrorScores {
            raw: val_raw,
            normalized: val_norm,
            stats: stats.clone(),
            source: ErrorSource::Validation,
        },
        ErrorScores {
            raw: test_raw,
            normalized: test_norm,
            stats,
            source: ErrorSource::Test,
        },
    ))
}

/// Trailing mean of length `window` per column; the first rows average
/// over the ticks available so far.
pub fn trailing_mean(m: &Matrix, window: usize) -> Matrix {
    let window = window.max(1);
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for c in 0..m.cols() {
        let mut acc = 0.0;
        for r in 0..m.rows() {
            acc += m[(r, c)];
            if r >= window {
                acc -= m[(r - window, c)];
            }
            let len = (r + 1).min(window);
            out[(r, c)] = acc / len as f64;
        }
    }
    out
}

/// Network-level OR of row-major `T × n` sensor flags.
pub fn network_flags(sensor_flags: &[bool], n: usize) -> Vec<bool> {
    if n == 0 {
        return Vec::new();
    }
    sensor_flags
        .chunks(n)
        .map(|row| row.iter().any(|&b| b))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Threshold {
    Global(f64),
    PerSensor(Vec<f64>),
}

/// Flags from one rule. `sensor` is row-major `T × n`; for the global rule
/// it marks the sensors whose (smoothed) score exceeds `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Flags {
    pub threshold: Threshold,
    pub network: Vec<bool>,
    pub sensor: Vec<bool>,
    pub n_sensors: usize,
}

fn check_cols(test: &Matrix, val: &Matrix) -> Result<()> {
    if val.rows() == 0 {
        return Err(Error::EmptyValidation);
    }
    if test.cols() != val.cols() {
        return Err(Error::LengthMismatch {
            expected: val.cols(),
            found: test.cols(),
        });
    }
    Ok(())
}

/// Global rule with `κ` the maximum validation score. Smoothing applies to
/// the test scores only.
pub fn global_threshold_flags(
    test_norm: &Matrix,
    val_norm: &Matrix,
    sma_window: Option<usize>,
) -> Result<Flags> {
    check_cols(test_norm, val_norm)?;
    let kappa = val_norm
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !kappa.is_finite() {
        return Err(Error::NonFinite("kappa"));
    }
    let smoothed;
    let scores = match sma_window {
        Some(w) if w > 1 => {
            smoothed = trailing_mean(test_norm, w);
            &smoothed
        }
        _ => test_norm,
    };
    let sensor: Vec<bool> = scores.as_slice().iter().map(|&v| v > kappa).collect();
    let n = test_norm.cols();
    Ok(Flags {
        threshold: Threshold::Global(kappa),
        network: network_flags(&sensor, n),
        sensor,
        n_sensors: n,
    })
}

/// Per-sensor `κ_i` from validation scores pooled over `{j : A_ji = 1}`.
pub fn sensor_thresholds(val_norm: &Matrix, adjacency: &Adjacency, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let n = val_norm.cols();
    if adjacency.n() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: adjacency.n(),
        });
    }
    if val_norm.rows() == 0 {
        return Err(Error::EmptyValidation);
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|j| val_norm.col(j)).collect();
    (0..n)
        .map(|i| {
            let pooled: Vec<f64> = adjacency
                .in_neighbors(i)
                .iter()
                .flat_map(|&j| columns[j].iter().copied())
                .collect();
            stats::percentile(&pooled, tau).ok_or(Error::NonFinite("kappa_i"))
        })
        .collect()
}

/// Per-sensor rule; the network flag is the OR over sensors.
pub fn sensor_threshold_flags(
    test_norm: &Matrix,
    val_norm: &Matrix,
    adjacency: &Adjacency,
    tau: f64,
) -> Result<Flags> {
    check_cols(test_norm, val_norm)?;
    let kappa = sensor_thresholds(val_norm, adjacency, tau)?;
    let n = test_norm.cols();
    let sensor: Vec<bool> = test_norm
        .as_slice()
        .iter()
        .enumerate()
        .map(|(idx, &v)| v > kappa[idx % n])
        .collect();
    Ok(Flags {
        threshold: Threshold::PerSensor(kappa),
        network: network_flags(&sensor, n),
        sensor,
        n_sensors: n,
    })
}

/// Adds a flag wherever the raw reading is negative.
pub fn positivity_filter_flags(raw: &Matrix, flags: &Flags) -> Result<Flags> {
    if raw.len() != flags.sensor.len() || raw.cols() != flags.n_sensors {
        return Err(Error::ShapeMismatch {
            op: "positivity_filter_flags",
            left: raw.shape(),
            right: (flags.network.len(), flags.n_sensors),
        });
    }
    let sensor: Vec<bool> = raw
        .as_slice()
        .iter()
        .zip(&flags.sensor)
        .map(|(&y, &f)| y < 0.0 || f)
        .collect();
    Ok(Flags {
        threshold: flags.threshold.clone(),
        network: network_flags(&sensor, flags.n_sensors),
        sensor,
        n_sensors: flags.n_sensors,
    })
}

/// A ratio whose denominator may be zero; undefined ratios read as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ratio {
    pub value: f64,
    pub defined: bool,
}

impl Ratio {
    pub fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Self {
                value: 0.0,
                defined: false,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[cfg_attr(feature = "serde", serde(rename = "fn"))]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_flags(flags: &[bool], labels: &[bool]) -> Result<Self> {
        if flags.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: labels.len(),
                found: flags.len(),
            });
        }
        let mut c = Self::default();
        for (&f, &l) in flags.iter().zip(labels) {
            match (f, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            recall: Ratio::of(self.tp, self.tp + self.fn_),
            precision: Ratio::of(self.tp, self.tp + self.fp),
            accuracy: Ratio::of(self.tp + self.tn, self.total()),
            specificity: Ratio::of(self.tn, self.tn + self.fp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub recall: Ratio,
    pub precision: Ratio,
    pub accuracy: Ratio,
    pub specificity: Ratio,
}

/// Share of network true positives whose flagged sensors include a true
/// anomalous sensor, or a member of its in-neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Localization {
    pub true_positives: usize,
    pub at_sensor: usize,
    pub in_neighborhood: usize,
    pub sensor_rate: Ratio,
    pub neighborhood_rate: Ratio,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectionReport {
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub localization: Option<Localization>,
}

/// Sensor-level inputs for localization.
#[derive(Debug, Clone, Copy)]
pub struct SensorTruth<'a> {
    /// Row-major `T × n` flags.
    pub flags: &'a [bool],
    /// Row-major `T × n` labels.
    pub labels: &'a [bool],
    pub adjacency: &'a Adjacency,
}

/// Confusion counts and metrics at network level, plus localization when
/// sensor-level truth is supplied.
pub fn evaluate(
    flags: &[bool],
    labels: &[bool],
    sensor: Option<SensorTruth<'_>>,
) -> Result<DetectionReport> {
    let confusion = Confusion::from_flags(flags, labels)?;
    let localization = match sensor {
        Some(s) => Some(localize(flags, labels, s)?),
        None => None,
    };
    Ok(DetectionReport {
        confusion,
        metrics: confusion.metrics(),
        localization,
    })
}

fn localize(flags: &[bool], labels: &[bool], s: SensorTruth<'_>) -> Result<Localization> {
    let n = s.adjacency.n();
    let cells = flags.len() * n;
    if s.flags.len() != cells || s.labels.len() != cells {
        return Err(Error::LengthMismatch {
            expected: cells,
            found: s.flags.len().min(s.labels.len()),
        });
    }
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| s.adjacency.in_neighbors(i)).collect();
    let (mut tps, mut at_sensor, mut in_nb) = (0, 0, 0);
    for t in 0..flags.len() {
        if !(flags[t] && labels[t]) {
            continue;
        }
        let row_flags = &s.flags[t * n..(t + 1) * n];
        let row_truth = &s.labels[t * n..(t + 1) * n];
        let truth: Vec<usize> = (0..n).filter(|&i| row_truth[i]).collect();
        if truth.is_empty() {
            continue;
        }
        tps += 1;
        if truth.iter().any(|&i| row_flags[i]) {
            at_sensor += 1;
        }
        if truth.iter().any(|&i| neighbors[i].iter().any(|&j| row_flags[j])) {
            in_nb += 1;
        }
    }
    Ok(Localization {
        true_positives: tps,
        at_sensor,
        in_neighborhood: in_nb,
        sensor_rate: Ratio::of(at_sensor, tps),
        neighborhood_rate: Ratio::of(in_nb, tps),
    })
}

/// Threshold rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Rule {
    Global,
    Sensor,
    SensorPositive,
}

/// Applies `rule`. `raw_test` (unscaled readings aligned with `test_norm`)
/// is required for [`Rule::SensorPositive`]; `adjacency` for both sensor
/// rules.
pub fn apply_rule(
    rule: Rule,
    test_norm: &Matrix,
    val_norm: &Matrix,
    adjacency: Option<&Adjacency>,
    raw_test: Option<&Matrix>,
    config: &DetectorConfig,
) -> Result<Flags> {
    config.validate()?;
    match rule {
        Rule::Global => global_threshold_flags(test_norm, val_norm, config.sma_window),
        Rule::Sensor | Rule::SensorPositive => {
            let adj = adjacency.ok_or_else(|| Error::param("adjacency", "required by the sensor rule"))?;
            let flags = sensor_threshold_flags(test_norm, val_norm, adj, config.tau)?;
            if rule == Rule::Sensor {
                return Ok(flags);
            }
            let raw = raw_test.ok_or_else(|| Error::param("raw_test", "required by the positivity rule"))?;
            positivity_filter_flags(raw, &flags)
        }
    }
}

/// Outcome of the persistence baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub val: ErrorScores,
    pub test: ErrorScores,
    pub flags: Flags,
    /// Ticks of the scored test rows (all but the first test tick).
    pub ticks: Vec<i64>,
    pub report: Option<DetectionReport>,
}

fn persistence_errors(series: &MultivariateSeries) -> Result<Matrix> {
    let t = series.len();
    if t < 2 {
        return Err(Error::WindowTooLong { len: t, window: 1 });
    }
    let v = series.values();
    let prev = v.slice_rows(0, t - 1);
    let next = v.slice_rows(1, t);
    compute_errors(&prev, &next)
}

/// Forecasts `ŷ(t) = y(t − 1)` within each block and runs the scores through
/// the same normalization and global rule. Metrics are reported when the
/// test block carries labels.
pub fn random_walk_baseline(
    val: &MultivariateSeries,
    test: &MultivariateSeries,
    config: &DetectorConfig,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let val_raw = persistence_errors(val)?;
    let test_raw = persistence_errors(test)?;
    let (val_scores, test_scores) = score_errors(val_raw, test_raw, config.iqr_floor)?;
    let flags = global_threshold_flags(&test_scores.normalized, &val_scores.normalized, config.sma_window)?;
    let report = match test.labels() {
        Some(l) => Some(evaluate(&flags.network, &l[1..], None)?),
        None => None,
    };
    Ok(BaselineOutcome {
        val: val_scores,
        test: test_scores,
        flags,
        ticks: test.ticks()[1..].to_vec(),
        report,
    })
}
