//! One function per CLI subcommand. Each reads its inputs from the config,
//! writes into an existing output directory and returns nothing else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gnnad_core::anomgen::proportion_anomalous;
use gnnad_core::detector::{evaluate as evaluate_flags, DetectionReport, SensorTruth};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{stage, Mode, RunConfig};
use crate::error::{AppError, Result};
use crate::io::{self, Labels};
use crate::pipeline::{self, kernel_name, ReplicateRow};

#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    /// `--mode`, overriding `detector.mode`.
    pub mode: Option<Mode>,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// The output directory must already exist.
pub fn check_out_dir(out: &Path) -> Result<()> {
    match std::fs::metadata(out) {
        Ok(m) if m.is_dir() => Ok(()),
        Ok(_) => Err(AppError::format(out, "output path is not a directory")),
        Err(e) => Err(AppError::io(out, e)),
    }
}

#[derive(Serialize)]
struct SimulateMetadata<'a> {
    seed: u64,
    simulation_seed: u64,
    n_sensors: usize,
    n_ticks: usize,
    train_ticks: usize,
    test_ticks: usize,
    sensor_ids: &'a [String],
    simulation: &'a crate::config::SimulationSection,
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let s = pipeline::simulate(cfg)?;
    let series = &s.simulation.series;
    io::write_series(&ctx.path("series.csv"), series)?;
    io::write_series(&ctx.path("train.csv"), &s.train)?;
    io::write_series(&ctx.path("test.csv"), &s.test)?;
    io::write_locations(&ctx.path("locations.csv"), &s.simulation.layout.locations)?;
    if let Some(net) = &s.simulation.layout.network {
        io::write_network(&ctx.out, net, series.sensor_ids())?;
    }
    io::write_json(
        &ctx.path("metadata.json"),
        &SimulateMetadata {
            seed: cfg.seed,
            simulation_seed: s.config.seed,
            n_sensors: series.n_sensors(),
            n_ticks: series.len(),
            train_ticks: s.train.len(),
            test_ticks: s.test.len(),
            sensor_ids: series.sensor_ids(),
            simulation: &cfg.simulation,
        },
    )
}

#[derive(Serialize)]
struct InjectSummary<'a> {
    seed: u64,
    anomaly_seed: u64,
    n_records: usize,
    labeled_fraction: f64,
    anomalies: &'a crate::config::AnomalySection,
}

pub fn inject(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let input = cfg.paths.require("series", &cfg.paths.series)?;
    let series = io::read_series(input, cfg.data.missing)?;
    let (out, records) = pipeline::inject(cfg, &series)?;
    let labels = out.labels().expect("inject attaches labels");
    io::write_series(&ctx.path("injected.csv"), &out)?;
    io::write_network_labels(&ctx.path("labels.csv"), out.ticks(), labels)?;
    if let Some(per) = out.sensor_labels() {
        io::write_sensor_labels(&ctx.path("sensor_labels.csv"), out.ticks(), out.sensor_ids(), per)?;
    }
    io::write_records(&ctx.path("anomalies.csv"), &out, &records)?;
    io::write_json(
        &ctx.path("inject.json"),
        &InjectSummary {
            seed: cfg.seed,
            anomaly_seed: cfg.stage_seed(stage::INJECT),
            n_records: records.len(),
            labeled_fraction: proportion_anomalous(labels),
            anomalies: &cfg.anomalies,
        },
    )
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let input = cfg.paths.require("train", &cfg.paths.train)?;
    let series = io::read_series(input, cfg.data.missing)?;
    let trained = pipeline::train_from_config(cfg, &series)?;
    trained.checkpoint.save(&ctx.path("checkpoint.json"))?;
    let rows = trained.model.history.iter().map(|h| {
        vec![
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_loss.to_string(),
        ]
    });
    io::write_rows(
        &ctx.path("loss_history.csv"),
        &["epoch", "train_loss", "val_loss"].map(String::from),
        rows,
    )
}

fn read_labelled(cfg: &RunConfig, path: &Path) -> Result<gnnad_core::MultivariateSeries> {
    let series = io::read_series(path, cfg.data.missing)?;
    match &cfg.paths.labels {
        Some(lp) => io::read_labels(lp)?.attach(series, lp),
        None => Ok(series),
    }
}

pub fn detect(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let mode = ctx.mode.unwrap_or(cfg.detector.mode);
    let detector = cfg.detector.to_core();
    let test_path = cfg.paths.require("test", &cfg.paths.test)?;
    let test = read_labelled(cfg, test_path)?;
    let detection = match mode {
        Mode::RwBaseline => {
            let train_path = cfg.paths.require("train", &cfg.paths.train)?;
            let train = io::read_series(train_path, cfg.data.missing)?;
            pipeline::detect_baseline(&detector, &cfg.data, &train, &test)?
        }
        _ => {
            let ckpt_path = cfg.paths.require("checkpoint", &cfg.paths.checkpoint)?;
            let (ckpt, model) = Checkpoint::load(ckpt_path)?;
            pipeline::detect_with_model(mode, &detector, &ckpt, &model, &test)?
        }
    };
    io::write_json(&ctx.path("report.json"), &detection.report_file())?;
    io::write_flags(
        &ctx.path("flags.csv"),
        &detection.ticks,
        &detection.sensor_ids,
        &detection.flags.network,
        &detection.flags.sensor,
    )?;
    io::write_matrix(&ctx.path("errors.csv"), &detection.ticks, &detection.sensor_ids, &detection.scores)?;
    io::write_matrix(
        &ctx.path("raw_errors.csv"),
        &detection.ticks,
        &detection.sensor_ids,
        &detection.raw_errors,
    )
}

/// Scores an existing flags file against labels. Localization is added
/// when the labels are per sensor and a checkpoint supplies the graph.
pub fn evaluate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let flags_path = cfg.paths.require("flags", &cfg.paths.flags)?;
    let labels_path = cfg
        .paths
        .labels
        .as_deref()
        .ok_or_else(|| AppError::Config("evaluation needs labels: set paths.labels".into()))?;
    let flags = io::read_flags(flags_path)?;
    let labels = io::read_labels(labels_path)?;
    let index: BTreeMap<i64, usize> = labels.ticks().iter().enumerate().map(|(r, &t)| (t, r)).collect();
    let rows: Vec<usize> = flags
        .ticks
        .iter()
        .map(|t| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| AppError::format(labels_path, format!("no label for tick {t}")))
        })
        .collect::<Result<_>>()?;
    let (network, per_sensor) = match &labels {
        Labels::Network { labels, .. } => (rows.iter().map(|&r| labels[r]).collect::<Vec<_>>(), None),
        Labels::Sensor { ids, labels, .. } => {
            let n = ids.len();
            if *ids != flags.ids {
                return Err(AppError::format(labels_path, "label columns do not match the flag columns"));
            }
            let per: Vec<bool> = rows.iter().flat_map(|&r| labels[r * n..(r + 1) * n].to_vec()).collect();
            let net = per.chunks(n).map(|c| c.iter().any(|&b| b)).collect();
            (net, Some(per))
        }
    };
    let model = match &cfg.paths.checkpoint {
        Some(p) if per_sensor.is_some() => Some(Checkpoint::load(p)?.1),
        _ => None,
    };
    let truth = match (&per_sensor, &model) {
        (Some(per), Some(m)) => Some(SensorTruth {
            flags: &flags.sensor,
            labels: per,
            adjacency: &m.adjacency,
        }),
        _ => None,
    };
    let report: DetectionReport = evaluate_flags(&flags.network, &network, truth)?;
    io::write_json(&ctx.path("evaluation.json"), &report)
}

fn metric_cells(r: &DetectionReport) -> Vec<String> {
    let c = &r.confusion;
    let m = &r.metrics;
    vec![
        c.tp.to_string(),
        c.fp.to_string(),
        c.tn.to_string(),
        c.fn_.to_string(),
        m.recall.value.to_string(),
        m.precision.value.to_string(),
        m.accuracy.value.to_string(),
        m.specificity.value.to_string(),
    ]
}

/// `summary.csv` rows: FN and FP per mode with the change relative to GDN
/// on the same dataset (empty when GDN was not run).
fn summary_rows(rows: &[ReplicateRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|row| {
            let base = rows
                .iter()
                .find(|b| b.replicate == row.replicate && b.kernel == row.kernel && b.mode == Mode::Gdn);
            let c = &row.report.confusion;
            let diff = |f: fn(&DetectionReport) -> usize| {
                base.map(|b| (f(&row.report) as i64 - f(&b.report) as i64).to_string())
                    .unwrap_or_default()
            };
            vec![
                row.replicate.to_string(),
                kernel_name(row.kernel).to_string(),
                row.mode.as_str().to_string(),
                (c.tp + c.fn_).to_string(),
                c.fn_.to_string(),
                c.fp.to_string(),
                diff(|r| r.confusion.fn_),
                diff(|r| r.confusion.fp),
            ]
        })
        .collect()
}

pub fn replicate(ctx: &Context) -> Result<()> {
    let (params, rows) = pipeline::replicate(&ctx.config)?;
    let header = [
        "replicate", "seed", "sigma2", "range_alpha", "nugget_sigma02", "beta0", "beta1", "delta", "zeta",
        "lambda_drift", "lambda_var", "n_drift", "n_var",
    ]
    .map(String::from);
    let prow = params.iter().map(|p| {
        vec![
            p.replicate.to_string(),
            p.seed.to_string(),
            p.sigma2.to_string(),
            p.range_alpha.to_string(),
            p.nugget_sigma02.to_string(),
            p.beta0.to_string(),
            p.beta1.to_string(),
            p.delta.to_string(),
            p.zeta.to_string(),
            p.lambda_drift.to_string(),
            p.lambda_var.to_string(),
            p.n_drift.to_string(),
            p.n_var.to_string(),
        ]
    });
    io::write_rows(&ctx.path("params.csv"), &header, prow)?;

    let header = [
        "replicate", "kernel", "mode", "tp", "fp", "tn", "fn", "recall", "precision", "accuracy", "specificity",
    ]
    .map(String::from);
    let crow = rows.iter().map(|r| {
        let mut cells = vec![
            r.replicate.to_string(),
            kernel_name(r.kernel).to_string(),
            r.mode.as_str().to_string(),
        ];
        cells.extend(metric_cells(&r.report));
        cells
    });
    io::write_rows(&ctx.path("confusion.csv"), &header, crow)?;

    let header = ["replicate", "kernel", "mode", "anomalies", "fn", "fp", "fn_change", "fp_change"].map(String::from);
    io::write_rows(&ctx.path("summary.csv"), &header, summary_rows(&rows))
}
