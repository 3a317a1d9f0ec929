//! Simulate, inject, train and detect as library calls. The CLI commands
//! and the replication study are thin wrappers around these.

use gnnad_core::anomgen::{self, AnomalyRecord};
use gnnad_core::detector::{
    apply_rule, compute_errors, evaluate, random_walk_baseline, score_errors, DetectionReport, DetectorConfig,
    Flags, NormStats, SensorTruth, Threshold,
};
use gnnad_core::gdn::{self, predict_series, FittedModel, GdnHyperparams};
use gnnad_core::rng::{derive_seed, stream, stream_rng};
use gnnad_core::series::{chronological_split, fit_scaling, split_validation_tail, window_dataset};
use gnnad_core::simgen::{simulate_on_layout, KernelKind, KernelParams, SimConfig, Simulation, SpatialLayout};
use gnnad_core::{Matrix, MultivariateSeries};
use rand::Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{stage, DataSection, Mode, ModelSection, RunConfig};
use crate::error::{AppError, Result};

/// A simulated series and its train/test blocks.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub config: SimConfig,
    pub simulation: Simulation,
    pub train: MultivariateSeries,
    pub test: MultivariateSeries,
}

/// Cuts a series into a training block of `⌊train_frac·T⌋` ticks and a test
/// block with the rest.
pub fn train_test_split(
    series: &MultivariateSeries,
    train_frac: f64,
) -> Result<(MultivariateSeries, MultivariateSeries)> {
    let split = chronological_split(series, train_frac, 0.0)?;
    Ok((split.train, split.test))
}

pub fn simulate(cfg: &RunConfig) -> Result<Simulated> {
    let config = cfg.simulation.to_core(cfg.stage_seed(stage::SIMULATE));
    config.validate().map_err(|e| AppError::Config(e.to_string()))?;
    let simulation = gnnad_core::simgen::simulate_response(&config)?;
    let (train, test) = train_test_split(&simulation.series, cfg.data.train_frac)?;
    Ok(Simulated {
        config,
        simulation,
        train,
        test,
    })
}

pub fn inject(cfg: &RunConfig, series: &MultivariateSeries) -> Result<(MultivariateSeries, Vec<AnomalyRecord>)> {
    let config = cfg.anomalies.to_core(cfg.stage_seed(stage::INJECT));
    Ok(anomgen::inject(series, &config)?)
}

/// A fitted model plus what `detect` needs from training.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: FittedModel,
    pub checkpoint: Checkpoint,
}

/// Holds out the validation tail, fits min-max scaling on the rest, trains,
/// and records the raw validation errors in model units.
pub fn train_model(
    model_cfg: &ModelSection,
    data: &DataSection,
    seed: u64,
    train: &MultivariateSeries,
) -> Result<Trained> {
    let hp: GdnHyperparams = model_cfg.to_core(seed);
    hp.validate(train.n_sensors())
        .map_err(|e| AppError::Config(e.to_string()))?;
    let (fit, val) = split_validation_tail(train, data.val_frac)?;
    let scaling = fit_scaling(&fit)?;
    let fit_set = window_dataset(&scaling.apply(&fit)?, hp.window)?;
    let val_set = window_dataset(&scaling.apply(&val)?, hp.window)?;
    let mut model = gdn::train(&fit_set, &val_set, &hp)?;
    model.scaling = Some(scaling);
    let forecast = predict_series(&model, &val)?;
    let val_errors = compute_errors(&forecast.predictions, &forecast.actuals)?;
    let checkpoint = Checkpoint::new(&model, train.sensor_ids(), &val_errors);
    Ok(Trained { model, checkpoint })
}

pub fn train_from_config(cfg: &RunConfig, train: &MultivariateSeries) -> Result<Trained> {
    train_model(&cfg.model, &cfg.data, cfg.stage_seed(stage::MODEL), train)
}

/// Flags, scores and (with labels) metrics for one mode.
#[derive(Debug, Clone)]
pub struct Detection {
    pub mode: Mode,
    pub detector: DetectorConfig,
    pub ticks: Vec<i64>,
    pub sensor_ids: Vec<String>,
    pub flags: Flags,
    pub raw_errors: Matrix,
    pub scores: Matrix,
    pub norm_stats: NormStats,
    pub report: Option<DetectionReport>,
}

fn check_sensors(expected: &[String], series: &MultivariateSeries) -> Result<()> {
    if expected != series.sensor_ids() {
        return Err(AppError::Config(
            "test series sensors do not match the model's sensors".into(),
        ));
    }
    Ok(())
}

/// Runs a threshold rule on the model's test forecasts. Only the ticks
/// after the first `w` of the test block are scored.
pub fn detect_with_model(
    mode: Mode,
    detector: &DetectorConfig,
    checkpoint: &Checkpoint,
    model: &FittedModel,
    test: &MultivariateSeries,
) -> Result<Detection> {
    let rule = mode
        .rule()
        .ok_or_else(|| AppError::Config(format!("mode {} does not use a model", mode.as_str())))?;
    detector
        .validate()
        .map_err(|e| AppError::Config(e.to_string()))?;
    check_sensors(&checkpoint.sensor_ids, test)?;
    let forecast = predict_series(model, test)?;
    let test_raw = compute_errors(&forecast.predictions, &forecast.actuals)?;
    let (val_scores, test_scores) = score_errors(checkpoint.validation_errors()?, test_raw, detector.iqr_floor)?;
    let w = model.hyperparams.window;
    let raw_readings = test.values().slice_rows(w, test.len());
    let flags = apply_rule(
        rule,
        &test_scores.normalized,
        &val_scores.normalized,
        Some(&model.adjacency),
        Some(&raw_readings),
        detector,
    )?;
    let n = test.n_sensors();
    let report = match test.labels() {
        Some(labels) => {
            let truth = test.sensor_labels().map(|s| SensorTruth {
                flags: &flags.sensor,
                labels: &s[w * n..],
                adjacency: &model.adjacency,
            });
            Some(evaluate(&flags.network, &labels[w..], truth)?)
        }
        None => None,
    };
    Ok(Detection {
        mode,
        detector: detector.clone(),
        ticks: forecast.ticks,
        sensor_ids: test.sensor_ids().to_vec(),
        flags,
        raw_errors: test_scores.raw,
        scores: test_scores.normalized,
        norm_stats: test_scores.stats,
        report,
    })
}

/// Persistence forecasts scored against the validation tail of `train`.
pub fn detect_baseline(
    detector: &DetectorConfig,
    data: &DataSection,
    train: &MultivariateSeries,
    test: &MultivariateSeries,
) -> Result<Detection> {
    detector
        .validate()
        .map_err(|e| AppError::Config(e.to_string()))?;
    check_sensors(train.sensor_ids(), test)?;
    let (_, val) = split_validation_tail(train, data.val_frac)?;
    let out = random_walk_baseline(&val, test, detector)?;
    Ok(Detection {
        mode: Mode::RwBaseline,
        detector: detector.clone(),
        ticks: out.ticks,
        sensor_ids: test.sensor_ids().to_vec(),
        flags: out.flags,
        raw_errors: out.test.raw,
        scores: out.test.normalized,
        norm_stats: out.test.stats,
        report: out.report,
    })
}

/// Report JSON written by `detect`.
#[derive(Debug, Clone, Serialize)]
pub struct ReportFile<'a> {
    pub mode: &'static str,
    pub tau: f64,
    pub iqr_floor: f64,
    pub sma_window: Option<usize>,
    pub threshold: &'a Threshold,
    pub norm_stats: &'a NormStats,
    pub n_ticks: usize,
    pub n_flagged: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<&'a DetectionReport>,
}

impl Detection {
    pub fn report_file(&self) -> ReportFile<'_> {
        ReportFile {
            mode: self.mode.as_str(),
            tau: self.detector.tau,
            iqr_floor: self.detector.iqr_floor,
            sma_window: self.detector.sma_window,
            threshold: &self.flags.threshold,
            norm_stats: &self.norm_stats,
            n_ticks: self.ticks.len(),
            n_flagged: self.flags.network.iter().filter(|&&b| b).count(),
            metrics: self.report.as_ref(),
        }
    }
}

/// Parameters drawn for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateParams {
    pub replicate: usize,
    pub seed: u64,
    pub sigma2: f64,
    pub range_alpha: f64,
    pub nugget_sigma02: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub delta: f64,
    pub zeta: f64,
    pub lambda_drift: f64,
    pub lambda_var: f64,
    pub n_drift: usize,
    pub n_var: usize,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_replicate_params(cfg: &RunConfig, replicate: usize) -> ReplicateParams {
    let r = &cfg.replicate;
    let seed = derive_seed(cfg.stage_seed(stage::REPLICATE), replicate as u64);
    let mut rng = stream_rng(seed, stream::REPLICATE_PARAMS);
    ReplicateParams {
        replicate,
        seed,
        sigma2: uniform(&mut rng, r.sigma2),
        range_alpha: uniform(&mut rng, r.range_alpha),
        nugget_sigma02: uniform(&mut rng, r.nugget_sigma02),
        beta0: uniform(&mut rng, r.beta0),
        beta1: uniform(&mut rng, r.beta1),
        delta: uniform(&mut rng, r.delta),
        zeta: uniform(&mut rng, r.zeta),
        lambda_drift: uniform(&mut rng, r.lambda_drift),
        lambda_var: uniform(&mut rng, r.lambda_var),
        n_drift: rng.random_range(r.n_drift[0]..=r.n_drift[1]),
        n_var: rng.random_range(r.n_var[0]..=r.n_var[1]),
    }
}

/// One row of the replication output.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub kernel: KernelKind,
    pub mode: Mode,
    pub report: DetectionReport,
}

pub fn kernel_name(kind: KernelKind) -> &'static str {
    match kind {
        KernelKind::Euclidean => "euclidean",
        KernelKind::Tailup => "tailup",
    }
}

/// A contaminated train/test dataset built from replicate parameters.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: MultivariateSeries,
    pub test: MultivariateSeries,
    pub records: Vec<AnomalyRecord>,
}

/// Seed for the parts of a replicate that differ between kernel kinds:
/// anomaly placement and training.
pub fn kernel_seed(p: &ReplicateParams, kind: KernelKind) -> u64 {
    let k = match kind {
        KernelKind::Euclidean => 0,
        KernelKind::Tailup => 1,
    };
    derive_seed(p.seed, 16 + k)
}

/// Simulates one replicate dataset on a shared layout. The sampled `σ²`
/// and `α` parameterize both the covariate field and the random effect.
/// Covariates are shared between kernel kinds; anomalies go into the test
/// block only, placed with a per-kind seed.
pub fn replicate_dataset(
    cfg: &RunConfig,
    p: &ReplicateParams,
    kind: KernelKind,
    layout: &SpatialLayout,
) -> Result<Dataset> {
    let r = &cfg.replicate;
    let sim = SimConfig {
        n_sensors: r.n_sensors,
        n_ticks: r.n_ticks,
        beta0: p.beta0,
        beta1: p.beta1,
        ma_weights: cfg.simulation.ma_weights.clone(),
        covariate_kernel: KernelParams::new(p.sigma2, p.range_alpha, cfg.simulation.covariate_kernel.nugget_sigma02)?,
        random_effect: Some(KernelParams::new(p.sigma2, p.range_alpha, p.nugget_sigma02)?),
        kernel_kind: kind,
        branch_prob: cfg.simulation.branch_prob,
        depth: cfg.simulation.depth,
        seed: derive_seed(p.seed, stage::SIMULATE),
    };
    let series = simulate_on_layout(&sim, layout)?;
    let (train, test) = train_test_split(&series, cfg.data.train_frac)?;
    let anomalies = anomgen::AnomalyConfig {
        n_drift: p.n_drift,
        n_var: p.n_var,
        lambda_drift: p.lambda_drift,
        lambda_var: p.lambda_var,
        delta: p.delta,
        zeta: p.zeta,
        seed: derive_seed(kernel_seed(p, kind), stage::INJECT),
    };
    let (test, records) = anomgen::inject(&test, &anomalies)?;
    Ok(Dataset { train, test, records })
}

/// Trains once on `data` and evaluates every requested mode.
pub fn evaluate_modes(cfg: &RunConfig, data: &Dataset, model_seed: u64, modes: &[Mode]) -> Result<Vec<Detection>> {
    let detector = cfg.detector.to_core();
    let needs_model = modes.iter().any(|m| m.rule().is_some());
    let trained = if needs_model {
        Some(train_model(&cfg.model, &cfg.data, model_seed, &data.train)?)
    } else {
        None
    };
    modes
        .iter()
        .map(|&mode| match (&trained, mode.rule()) {
            (Some(t), Some(_)) => detect_with_model(mode, &detector, &t.checkpoint, &t.model, &data.test),
            _ => detect_baseline(&detector, &cfg.data, &data.train, &data.test),
        })
        .collect()
}

/// Runs the replication study. Replicates run one after another; each
/// shares one river layout between the two kernel kinds.
pub fn replicate(cfg: &RunConfig) -> Result<(Vec<ReplicateParams>, Vec<ReplicateRow>)> {
    cfg.replicate.validate()?;
    let r = &cfg.replicate;
    let mut params = Vec::with_capacity(r.n_replicates);
    let mut rows = Vec::new();
    for i in 0..r.n_replicates {
        let p = sample_replicate_params(cfg, i);
        let layout = SpatialLayout::river(r.n_sensors, cfg.simulation.branch_prob, cfg.simulation.depth, p.seed)?;
        for &kind in &r.kernels {
            let data = replicate_dataset(cfg, &p, kind, &layout)?;
            let detections = evaluate_modes(cfg, &data, derive_seed(kernel_seed(&p, kind), stage::MODEL), &r.modes)?;
            for d in detections {
                let report = d
                    .report
                    .ok_or_else(|| AppError::Config("replicate test block has no labels".into()))?;
                rows.push(ReplicateRow {
                    replicate: i,
                    kernel: kind,
                    mode: d.mode,
                    report,
                });
            }
        }
        params.push(p);
    }
    Ok((params, rows))
}
