//! Drift and high-variability subsequence anomalies.
//!
//! For each anomaly a sensor and a start tick are drawn uniformly and a
//! length `L ~ Poisson(λ)`. Drift adds `(δ, 2δ, …, Lδ)`; variability adds
//! iid `N(0, ζ²)` noise. All drift anomalies are drawn before the
//! variability ones. Subsequences running past the last tick are truncated,
//! overlapping anomalies add up, and their labels are unioned.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::series::MultivariateSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AnomalyKind {
    Drift,
    Variability,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Drift => "drift",
            AnomalyKind::Variability => "variability",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyConfig {
    pub n_drift: usize,
    pub n_var: usize,
    pub lambda_drift: f64,
    pub lambda_var: f64,
    /// Drift step per tick, response units.
    pub delta: f64,
    /// Standard deviation of variability noise, response units.
    pub zeta: f64,
    pub seed: u64,
}

impl AnomalyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_drift", self.lambda_drift), ("lambda_var", self.lambda_var)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::param("delta", format!("must be > 0, got {}", self.delta)));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::param("zeta", format!("must be > 0, got {}", self.zeta)));
        }
        Ok(())
    }
}

/// One drawn anomaly. `start_tick` is a 1-based row position; `length` is
/// the drawn Poisson length before truncation at the end of the series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyRecord {
    pub kind: AnomalyKind,
    pub sensor: usize,
    pub start_tick: usize,
    pub length: usize,
}

impl AnomalyRecord {
    /// Number of ticks actually modified in a series of `n_ticks`.
    pub fn realized_length(&self, n_ticks: usize) -> usize {
        self.length.min(n_ticks + 1 - self.start_tick)
    }
}

/// Contaminates `series` and returns it with per-sensor and network labels.
/// Existing labels are kept and unioned with the new ones.
pub fn inject(
    series: &MultivariateSeries,
    config: &AnomalyConfig,
) -> Result<(MultivariateSeries, Vec<AnomalyRecord>)> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    config.validate()?;
    let t_len = series.len();
    let n = series.n_sensors();
    let mut rng = rng::stream_rng(config.seed, stream::ANOMALIES);
    let mut out = series.clone();
    let mut sensor_labels = series
        .sensor_labels()
        .map(<[bool]>::to_vec)
        .unwrap_or_else(|| alloc::vec![false; t_len * n]);
    let mut records = Vec::with_capacity(config.n_drift + config.n_var);

    let plan = [
        (AnomalyKind::Drift, config.n_drift, config.lambda_drift),
        (AnomalyKind::Variability, config.n_var, config.lambda_var),
    ];
    let noise = Normal::new(0.0, config.zeta).map_err(|_| Error::param("zeta", "invalid"))?;
    for (kind, count, lambda) in plan {
        let poisson = Poisson::new(lambda).map_err(|_| Error::param("lambda", "invalid"))?;
        for _ in 0..count {
            let sensor = rng.random_range(0..n);
            let start_tick = rng.random_range(1..=t_len);
            let length = poisson.sample(&mut rng) as usize;
            let record = AnomalyRecord {
                kind,
                sensor,
                start_tick,
                length,
            };
            // draws for the whole subsequence keep the stream independent of T
            let additions: Vec<f64> = match kind {
                AnomalyKind::Drift => (1..=length).map(|k| k as f64 * config.delta).collect(),
                AnomalyKind::Variability => (0..length).map(|_| noise.sample(&mut rng)).collect(),
            };
            let values = out.values_mut();
            for (k, add) in additions.iter().take(record.realized_length(t_len)).enumerate() {
                let row = start_tick - 1 + k;
                values[(row, sensor)] += add;
                sensor_labels[row * n + sensor] = true;
            }
            records.push(record);
        }
    }

    let mut labels: Vec<bool> = sensor_labels
        .chunks(n)
        .map(|row| row.iter().any(|&b| b))
        .collect();
    // network-only input labels cannot be attributed to sensors
    let network_only = series.labels().is_some() && series.sensor_labels().is_none();
    if let Some(existing) = series.labels() {
        for (l, &e) in labels.iter_mut().zip(existing) {
            *l |= e;
        }
    }
    out.set_labels_unchecked(labels, (!network_only).then_some(sensor_labels));
    Ok((out, records))
}

/// Fraction of ticks with a positive network label.
pub fn proportion_anomalous(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|&&b| b).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use alloc::vec;

    fn flat(t: usize, n: usize) -> MultivariateSeries {
        MultivariateSeries::from_values(Matrix::from_fn(t, n, |r, c| (r + c) as f64 * 0.1)).unwrap()
    }

    fn cfg(n_drift: usize, n_var: usize) -> AnomalyConfig {
        AnomalyConfig {
            n_drift,
            n_var,
            lambda_drift: 11.0,
            lambda_var: 3.0,
            delta: 1.0,
            zeta: 12.0,
            seed: 9,
        }
    }

    #[test]
    fn no_anomalies_is_identity() {
        let s = flat(50, 3);
        let (out, records) = inject(&s, &cfg(0, 0)).unwrap();
        assert!(records.is_empty());
        assert_eq!(out.values(), s.values());
        assert!(out.labels().unwrap().iter().all(|&b| !b));
        assert!(out.sensor_labels().unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn drift_adds_linear_ramp() {
        let s = flat(400, 4);
        let (out, records) = inject(&s, &cfg(6, 0)).unwrap();
        assert_eq!(records.len(), 6);
        // check the first record that does not overlap any other
        for (idx, r) in records.iter().enumerate() {
            let overlaps = records.iter().enumerate().any(|(j, o)| {
                j != idx
                    && o.sensor == r.sensor
                    && o.start_tick < r.start_tick + r.length
                    && r.start_tick < o.start_tick + o.length
            });
            if overlaps {
                continue;
            }
            for k in 0..r.realized_length(400) {
                let row = r.start_tick - 1 + k;
                let added = out.values()[(row, r.sensor)] - s.values()[(row, r.sensor)];
                assert!((added - (k + 1) as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn untouched_cells_are_identical() {
        let s = flat(300, 5);
        let (out, _) = inject(&s, &cfg(3, 10)).unwrap();
        let labels = out.sensor_labels().unwrap();
        for (idx, (&a, &b)) in s.values().as_slice().iter().zip(out.values().as_slice()).enumerate() {
            if !labels[idx] {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn labels_bounded_by_realized_lengths() {
        let s = flat(200, 3);
        let (out, records) = inject(&s, &cfg(5, 24)).unwrap();
        let labeled = out.sensor_labels().unwrap().iter().filter(|&&b| b).count();
        let total: usize = records.iter().map(|r| r.realized_length(200)).sum();
        assert!(total >= labeled);
        assert!(records.iter().all(|r| r.start_tick >= 1 && r.start_tick <= 200));
    }

    #[test]
    fn seeded_runs_repeat() {
        let s = flat(100, 3);
        assert_eq!(inject(&s, &cfg(4, 4)).unwrap(), inject(&s, &cfg(4, 4)).unwrap());
    }

    #[test]
    fn existing_labels_are_kept() {
        let s = flat(10, 2).with_labels(vec![true; 10]).unwrap();
        let (out, _) = inject(&s, &cfg(0, 0)).unwrap();
        assert!(out.labels().unwrap().iter().all(|&b| b));
        assert!(out.sensor_labels().is_none());
    }

    #[test]
    fn proportion() {
        assert_eq!(proportion_anomalous(&[false; 8]), 0.0);
        let mut l = vec![false; 10];
        l[1] = true;
        l[4] = true;
        l[9] = true;
        assert_eq!(proportion_anomalous(&l), 0.3);
    }
}
