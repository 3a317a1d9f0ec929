//! Run configuration: one JSON document with nested, fully defaulted
//! sections. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use gnnad_core::anomgen::AnomalyConfig;
use gnnad_core::detector::{DetectorConfig, Rule, DEFAULT_IQR_FLOOR, DEFAULT_TAU};
use gnnad_core::gdn::{GdnHyperparams, GraphRefresh};
use gnnad_core::simgen::{default_ma_weights, KernelKind, KernelParams, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AppError, Result};
use crate::io::MissingPolicy;

/// Stage indices fed to `derive_seed` with the master seed.
pub mod stage {
    pub const SIMULATE: u64 = 0;
    pub const INJECT: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const REPLICATE: u64 = 3;
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulation: SimulationSection,
    pub anomalies: AnomalySection,
    pub data: DataSection,
    pub model: ModelSection,
    pub detector: DetectSection,
    pub replicate: ReplicateSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub sigma2: f64,
    pub range_alpha: f64,
    #[serde(default)]
    pub nugget_sigma02: f64,
}

impl From<KernelSection> for KernelParams {
    fn from(k: KernelSection) -> Self {
        KernelParams {
            sigma2: k.sigma2,
            range_alpha: k.range_alpha,
            nugget_sigma02: k.nugget_sigma02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub n_sensors: usize,
    pub n_ticks: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub ma_weights: Vec<f64>,
    pub covariate_kernel: KernelSection,
    /// `null` drops the random effect and the noise term.
    pub random_effect: Option<KernelSection>,
    pub kernel_kind: KernelKind,
    pub branch_prob: f64,
    pub depth: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_sensors: 40,
            n_ticks: 4000,
            beta0: 5.0,
            beta1: 1.0,
            ma_weights: default_ma_weights(3),
            covariate_kernel: KernelSection {
                sigma2: 1.0,
                range_alpha: 10.0,
                nugget_sigma02: 0.0,
            },
            random_effect: Some(KernelSection {
                sigma2: 1.0,
                range_alpha: 10.0,
                nugget_sigma02: 0.1,
            }),
            kernel_kind: KernelKind::Euclidean,
            branch_prob: 0.8,
            depth: 5,
        }
    }
}

impl SimulationSection {
    pub fn to_core(&self, seed: u64) -> SimConfig {
        SimConfig {
            n_sensors: self.n_sensors,
            n_ticks: self.n_ticks,
            beta0: self.beta0,
            beta1: self.beta1,
            ma_weights: self.ma_weights.clone(),
            covariate_kernel: self.covariate_kernel.into(),
            random_effect: self.random_effect.map(Into::into),
            kernel_kind: self.kernel_kind,
            branch_prob: self.branch_prob,
            depth: self.depth,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalySection {
    pub n_drift: usize,
    pub n_var: usize,
    pub lambda_drift: f64,
    pub lambda_var: f64,
    pub delta: f64,
    pub zeta: f64,
}

impl Default for AnomalySection {
    fn default() -> Self {
        Self {
            n_drift: 5,
            n_var: 24,
            lambda_drift: 11.0,
            lambda_var: 3.0,
            delta: 4.5,
            zeta: 13.5,
        }
    }
}

impl AnomalySection {
    pub fn to_core(&self, seed: u64) -> AnomalyConfig {
        AnomalyConfig {
            n_drift: self.n_drift,
            n_var: self.n_var,
            lambda_drift: self.lambda_drift,
            lambda_var: self.lambda_var,
            delta: self.delta,
            zeta: self.zeta,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Share of a simulated series written as the training file.
    pub train_frac: f64,
    /// Tail of the training file held out for validation.
    pub val_frac: f64,
    pub missing: MissingPolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_frac: 0.75,
            val_frac: 0.1,
            missing: MissingPolicy::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub window: usize,
    pub embed_dim: usize,
    pub top_k: usize,
    pub leaky_slope: f64,
    pub candidates: Option<Vec<Vec<usize>>>,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub graph_refresh: GraphRefresh,
}

impl Default for ModelSection {
    fn default() -> Self {
        let hp = GdnHyperparams::default();
        Self {
            window: hp.window,
            embed_dim: hp.embed_dim,
            top_k: hp.top_k,
            leaky_slope: hp.leaky_slope,
            candidates: hp.candidates,
            hidden_width: hp.hidden_width,
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            max_epochs: hp.max_epochs,
            patience: hp.patience,
            graph_refresh: hp.graph_refresh,
        }
    }
}

impl ModelSection {
    pub fn to_core(&self, seed: u64) -> GdnHyperparams {
        GdnHyperparams {
            window: self.window,
            embed_dim: self.embed_dim,
            top_k: self.top_k,
            leaky_slope: self.leaky_slope,
            candidates: self.candidates.clone(),
            hidden_width: self.hidden_width,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            graph_refresh: self.graph_refresh,
            seed,
        }
    }
}

/// Detection mode selected with `--mode` or `detector.mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Gdn,
    GdnPlus,
    GdnPlusPlus,
    RwBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Gdn => "gdn",
            Mode::GdnPlus => "gdn_plus",
            Mode::GdnPlusPlus => "gdn_plus_plus",
            Mode::RwBaseline => "rw_baseline",
        }
    }

    /// Threshold rule for the model-based modes.
    pub fn rule(self) -> Option<Rule> {
        match self {
            Mode::Gdn => Some(Rule::Global),
            Mode::GdnPlus => Some(Rule::Sensor),
            Mode::GdnPlusPlus => Some(Rule::SensorPositive),
            Mode::RwBaseline => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub mode: Mode,
    pub iqr_floor: f64,
    pub tau: f64,
    pub sma_window: Option<usize>,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            mode: Mode::Gdn,
            iqr_floor: DEFAULT_IQR_FLOOR,
            tau: DEFAULT_TAU,
            sma_window: None,
        }
    }
}

impl DetectSection {
    pub fn to_core(&self) -> DetectorConfig {
        DetectorConfig {
            iqr_floor: self.iqr_floor,
            tau: self.tau,
            sma_window: self.sma_window,
        }
    }
}

/// Closed interval `[lo, hi]` sampled uniformly.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateSection {
    pub n_replicates: usize,
    pub n_sensors: usize,
    pub n_ticks: usize,
    pub kernels: Vec<KernelKind>,
    pub modes: Vec<Mode>,
    pub sigma2: Range,
    pub range_alpha: Range,
    pub nugget_sigma02: Range,
    pub beta0: Range,
    pub beta1: Range,
    pub delta: Range,
    pub zeta: Range,
    pub lambda_drift: Range,
    pub lambda_var: Range,
    /// Integer ranges, both ends inclusive.
    pub n_drift: [usize; 2],
    pub n_var: [usize; 2],
}

impl Default for ReplicateSection {
    fn default() -> Self {
        Self {
            n_replicates: 10,
            n_sensors: 40,
            n_ticks: 4000,
            kernels: vec![KernelKind::Euclidean, KernelKind::Tailup],
            modes: vec![Mode::Gdn, Mode::GdnPlus],
            sigma2: [1.0, 5.0],
            range_alpha: [5.0, 15.0],
            nugget_sigma02: [0.0, 1.0],
            beta0: [1.0, 10.0],
            beta1: [1.0, 10.0],
            delta: [3.0, 6.0],
            zeta: [12.0, 15.0],
            lambda_drift: [5.0, 10.0],
            lambda_var: [2.0, 10.0],
            n_drift: [50, 100],
            n_var: [50, 100],
        }
    }
}

impl ReplicateSection {
    pub fn validate(&self) -> Result<()> {
        let real = [
            ("sigma2", self.sigma2),
            ("range_alpha", self.range_alpha),
            ("nugget_sigma02", self.nugget_sigma02),
            ("beta0", self.beta0),
            ("beta1", self.beta1),
            ("delta", self.delta),
            ("zeta", self.zeta),
            ("lambda_drift", self.lambda_drift),
            ("lambda_var", self.lambda_var),
        ];
        for (name, [lo, hi]) in real {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AppError::Config(format!("replicate.{name}: invalid range [{lo}, {hi}]")));
            }
        }
        for (name, [lo, hi]) in [("n_drift", self.n_drift), ("n_var", self.n_var)] {
            if lo > hi {
                return Err(AppError::Config(format!("replicate.{name}: invalid range [{lo}, {hi}]")));
            }
        }
        if self.kernels.is_empty() || self.modes.is_empty() {
            return Err(AppError::Config("replicate.kernels and replicate.modes must be non-empty".into()));
        }
        Ok(())
    }
}

/// Input and output locations. Nothing here has a default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub series: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub flags: Option<PathBuf>,
}

impl PathsSection {
    /// The path under `paths.<name>`, or a configuration error.
    pub fn require<'a>(&self, name: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| AppError::Config(format!("paths.{name} is required for this command")))
    }
}

fn parse_override(text: &str) -> Result<(Vec<&str>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| AppError::Config(format!("--set expects key=value, got {text:?}")))?;
    let keys: Vec<&str> = key.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(AppError::Config(format!("--set has an empty key segment in {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((keys, value))
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, and as a plain string otherwise.
pub fn apply_override(doc: &mut Value, text: &str) -> Result<()> {
    let (keys, value) = parse_override(text)?;
    let mut node = doc;
    for (depth, key) in keys.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(AppError::Config(format!(
                    "--set {}: {} is not a section",
                    keys.join("."),
                    keys[..depth].join(".")
                )));
            }
        }
        let map = node.as_object_mut().expect("object");
        if depth + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("keys is non-empty")
}

impl RunConfig {
    /// Parses a JSON config document, applying overrides first.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        if doc.is_null() {
            doc = Value::Object(Default::default());
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Null,
        };
        Self::from_value(doc, overrides)
    }

    /// Checks every section that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: gnnad_core::Error| AppError::Config(e.to_string());
        self.simulation.to_core(0).validate().map_err(cfg_err)?;
        self.anomalies.to_core(0).validate().map_err(cfg_err)?;
        self.detector.to_core().validate().map_err(cfg_err)?;
        let d = &self.data;
        if !(d.train_frac > 0.0 && d.train_frac < 1.0) {
            return Err(AppError::Config(format!("data.train_frac must lie in (0, 1), got {}", d.train_frac)));
        }
        if !(d.val_frac > 0.0 && d.val_frac < 1.0) {
            return Err(AppError::Config(format!("data.val_frac must lie in (0, 1), got {}", d.val_frac)));
        }
        self.replicate.validate()
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        gnnad_core::rng::derive_seed(self.seed, stage)
    }
}
