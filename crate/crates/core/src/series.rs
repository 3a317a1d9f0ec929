//! Multivariate sensor series and the data preparation steps that feed the
//! forecaster: chronological splits, train-fitted min-max scaling and lag
//! windows.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `T × n` sensor readings with tick keys, sensor names and optional
/// anomaly labels.
///
/// Invariants enforced at construction: finite values, unique sensor ids,
/// strictly increasing ticks, and (when both label levels are present) a
/// network label that is the OR of the per-sensor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    values: Matrix,
    ticks: Vec<i64>,
    sensor_ids: Vec<String>,
    labels: Option<Vec<bool>>,
    sensor_labels: Option<Vec<bool>>,
}

impl MultivariateSeries {
    pub fn new(values: Matrix, ticks: Vec<i64>, sensor_ids: Vec<String>) -> Result<Self> {
        if ticks.len() != values.rows() {
            return Err(Error::LengthMismatch {
                expected: values.rows(),
                found: ticks.len(),
            });
        }
        if sensor_ids.len() != values.cols() {
            return Err(Error::LengthMismatch {
                expected: values.cols(),
                found: sensor_ids.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for id in &sensor_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidSeries(format!("duplicate sensor id {id:?}")));
            }
        }
        if let Some(w) = ticks.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSeries(format!(
                "tick {} does not increase after {}",
                w[1], w[0]
            )));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            let n = values.cols();
            return Err(Error::InvalidSeries(format!(
                "non-finite value at row {}, sensor {:?}",
                pos / n,
                sensor_ids[pos % n]
            )));
        }
        Ok(Self {
            values,
            ticks,
            sensor_ids,
            labels: None,
            sensor_labels: None,
        })
    }

    /// Series with ticks `1..=T` and sensors named `s1..sn`.
    pub fn from_values(values: Matrix) -> Result<Self> {
        let ticks = (1..=values.rows() as i64).collect();
        let ids = default_sensor_ids(values.cols());
        Self::new(values, ticks, ids)
    }

    /// Attaches network-level labels.
    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        self.check_label_consistency()?;
        Ok(self)
    }

    /// Attaches per-sensor labels (row-major `T × n`). Network labels are
    /// derived from them when absent.
    pub fn with_sensor_labels(mut self, sensor_labels: Vec<bool>) -> Result<Self> {
        if sensor_labels.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                expected: self.values.len(),
                found: sensor_labels.len(),
            });
        }
        if self.labels.is_none() {
            let n = self.n_sensors();
            self.labels = Some(
                sensor_labels
                    .chunks(n.max(1))
                    .map(|row| row.iter().any(|&b| b))
                    .collect(),
            );
        }
        self.sensor_labels = Some(sensor_labels);
        self.check_label_consistency()?;
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self.sensor_labels = None;
        self
    }

    fn check_label_consistency(&self) -> Result<()> {
        if let (Some(net), Some(per)) = (&self.labels, &self.sensor_labels) {
            let n = self.n_sensors().max(1);
            for (t, row) in per.chunks(n).enumerate() {
                if net[t] != row.iter().any(|&b| b) {
                    return Err(Error::InvalidSeries(format!(
                        "network label at row {t} disagrees with sensor labels"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of ticks `T`.
    #[inline]
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn n_sensors(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn ticks(&self) -> &[i64] {
        &self.ticks
    }

    #[inline]
    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    /// Row-major `T × n` per-sensor labels.
    pub fn sensor_labels(&self) -> Option<&[bool]> {
        self.sensor_labels.as_deref()
    }

    /// Replaces the values, keeping ticks, ids and labels.
    pub fn with_values(&self, values: Matrix) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_values",
                left: self.values.shape(),
                right: values.shape(),
            });
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("series values"));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub(crate) fn set_labels_unchecked(&mut self, labels: Vec<bool>, sensor_labels: Option<Vec<bool>>) {
        self.labels = Some(labels);
        self.sensor_labels = sensor_labels;
    }

    pub(crate) fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    /// Copy of ticks `start..end` (row indices), labels included.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let n = self.n_sensors();
        Self {
            values: self.values.slice_rows(start, end),
            ticks: self.ticks[start..end].to_vec(),
            sensor_ids: self.sensor_ids.clone(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            sensor_labels: self
                .sensor_labels
                .as_ref()
                .map(|l| l[start * n..end * n].to_vec()),
        }
    }
}

pub fn default_sensor_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i}")).collect()
}

/// Three contiguous, ordered blocks of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: MultivariateSeries,
    pub val: MultivariateSeries,
    pub test: MultivariateSeries,
}

/// Splits into train `⌊train_frac·T⌋`, validation `⌊val_frac·T⌋` and the
/// remainder as test, preserving order.
pub fn chronological_split(
    series: &MultivariateSeries,
    train_frac: f64,
    val_frac: f64,
) -> Result<Split> {
    let valid = train_frac > 0.0
        && train_frac < 1.0
        && (0.0..1.0).contains(&val_frac)
        && train_frac + val_frac < 1.0;
    if !valid {
        return Err(Error::InvalidFractions {
            train: train_frac,
            val: val_frac,
        });
    }
    let t = series.len();
    let n_train = libm::floor(train_frac * t as f64) as usize;
    let n_val = libm::floor(val_frac * t as f64) as usize;
    Ok(Split {
        train: series.slice(0, n_train),
        val: series.slice(n_train, n_train + n_val),
        test: series.slice(n_train + n_val, t),
    })
}

/// Splits off the last `⌊val_frac·T⌋` ticks of a training block as the
/// validation set.
pub fn split_validation_tail(
    series: &MultivariateSeries,
    val_frac: f64,
) -> Result<(MultivariateSeries, MultivariateSeries)> {
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidFractions {
            train: 1.0 - val_frac,
            val: val_frac,
        });
    }
    let t = series.len();
    let n_val = libm::floor(val_frac * t as f64) as usize;
    Ok((series.slice(0, t - n_val), series.slice(t - n_val, t)))
}

/// Per-sensor min and max of the training block.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScalingStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_scaling(train: &MultivariateSeries) -> Result<ScalingStats> {
    if train.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = train.n_sensors();
    let mut min = alloc::vec![f64::INFINITY; n];
    let mut max = alloc::vec![f64::NEG_INFINITY; n];
    for t in 0..train.len() {
        for (i, &v) in train.values().row(t).iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    Ok(ScalingStats { min, max })
}

impl ScalingStats {
    fn check(&self, series: &MultivariateSeries) -> Result<()> {
        if series.n_sensors() != self.min.len() {
            return Err(Error::LengthMismatch {
                expected: self.min.len(),
                found: series.n_sensors(),
            });
        }
        Ok(())
    }

    /// `(x − min)/(max − min)` per sensor; sensors with `max = min` map to 0.
    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.check(series)?;
        let mut values = series.values().clone();
        for t in 0..values.rows() {
            for (i, v) in values.row_mut(t).iter_mut().enumerate() {
                let range = self.max[i] - self.min[i];
                *v = if range > 0.0 {
                    (*v - self.min[i]) / range
                } else {
                    0.0
                };
            }
        }
        series.with_values(values)
    }

    /// Inverse of [`ScalingStats::apply`]; degenerate sensors map back to
    /// their constant training value.
    pub fn invert(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.check(series)?;
        let mut values = series.values().clone();
        for t in 0..values.rows() {
            for (i, v) in values.row_mut(t).iter_mut().enumerate() {
                let range = self.max[i] - self.min[i];
                *v = self.min[i] + *v * range;
            }
        }
        series.with_values(values)
    }
}

/// One forecasting example: lags `X⁽ᵗ⁾` and the target `y⁽ᵗ⁾`.
///
/// `input` is `n × w` with column `j` holding tick `t − j − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Matrix,
    pub target: Vec<f64>,
    pub target_tick: i64,
}

/// All `T − w` windows, targets at the ticks after the first `w`.
pub fn window_dataset(series: &MultivariateSeries, w: usize) -> Result<Vec<WindowSample>> {
    let t_len = series.len();
    if w == 0 {
        return Err(Error::param("window", "must be at least 1"));
    }
    if t_len <= w {
        return Err(Error::WindowTooLong {
            len: t_len,
            window: w,
        });
    }
    let n = series.n_sensors();
    let values = series.values();
    Ok((w..t_len)
        .map(|t| WindowSample {
            input: Matrix::from_fn(n, w, |i, j| values[(t - j - 1, i)]),
            target: values.row(t).to_vec(),
            target_tick: series.ticks()[t],
        })
        .collect())
}
