//! Versioned JSON checkpoint for a fitted forecaster.
//!
//! Tensors are stored as `{"name", "rows", "cols", "data"}` with `data` in
//! row-major order. Every float is an IEEE-754 double written in shortest
//! round-trip form, so loading restores the exact bits. The adjacency is a
//! row-major `n × n` array of 0/1 where entry `(j, i)` is 1 when sensor `j`
//! feeds sensor `i`.

use std::path::Path;

use gnnad_core::gdn::{Adjacency, EpochLoss, FittedModel, GdnHyperparams, GdnParams, BLOCK_NAMES};
use gnnad_core::series::ScalingStats;
use gnnad_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::write_json;

pub const FORMAT: &str = "gnnad-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> gnnad_core::Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencyData {
    pub n: usize,
    pub data: Vec<u8>,
}

/// Read first, so a newer layout fails on its version rather than on an
/// unknown field.
#[derive(Deserialize)]
struct Header {
    #[serde(default)]
    format: String,
    #[serde(default)]
    version: u64,
}

/// Everything `detect` needs: the model, its sensor names and the raw
/// validation errors in model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub sensor_ids: Vec<String>,
    pub hyperparams: GdnHyperparams,
    pub scaling: Option<ScalingStats>,
    pub params: Vec<Tensor>,
    pub adjacency: AdjacencyData,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub validation_errors: Tensor,
}

impl Checkpoint {
    pub fn new(model: &FittedModel, sensor_ids: &[String], validation_errors: &Matrix) -> Self {
        let params = BLOCK_NAMES
            .iter()
            .zip(model.params.blocks())
            .map(|(name, m)| Tensor::new(name, m))
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            sensor_ids: sensor_ids.to_vec(),
            hyperparams: model.hyperparams.clone(),
            scaling: model.scaling.clone(),
            params,
            adjacency: AdjacencyData {
                n: model.adjacency.n(),
                data: model.adjacency.entries().iter().map(|&b| u8::from(b)).collect(),
            },
            history: model.history.clone(),
            best_epoch: model.best_epoch,
            validation_errors: Tensor::new("validation_errors", validation_errors),
        }
    }

    /// Rebuilds the model, checking shapes against the stored sensor count.
    pub fn model(&self) -> gnnad_core::Result<FittedModel> {
        let n = self.sensor_ids.len();
        let mut blocks = Vec::with_capacity(BLOCK_NAMES.len());
        for (expected, t) in BLOCK_NAMES.iter().zip(&self.params) {
            if t.name != *expected {
                return Err(gnnad_core::Error::InvalidParameter {
                    name: "params",
                    reason: format!("expected block {expected}, found {}", t.name),
                });
            }
            blocks.push(t.to_matrix()?);
        }
        if self.params.len() != BLOCK_NAMES.len() {
            return Err(gnnad_core::Error::LengthMismatch {
                expected: BLOCK_NAMES.len(),
                found: self.params.len(),
            });
        }
        let params = GdnParams::from_blocks(&blocks)?;
        if params.n_sensors() != n {
            return Err(gnnad_core::Error::LengthMismatch {
                expected: n,
                found: params.n_sensors(),
            });
        }
        self.hyperparams.validate(n)?;
        if self.adjacency.data.iter().any(|&b| b > 1) {
            return Err(gnnad_core::Error::InvalidParameter {
                name: "adjacency",
                reason: "entries must be 0 or 1".into(),
            });
        }
        let adjacency = Adjacency::from_entries(
            self.adjacency.n,
            self.adjacency.data.iter().map(|&b| b == 1).collect(),
        )?;
        if adjacency.n() != n {
            return Err(gnnad_core::Error::LengthMismatch {
                expected: n,
                found: adjacency.n(),
            });
        }
        Ok(FittedModel {
            params,
            hyperparams: self.hyperparams.clone(),
            scaling: self.scaling.clone(),
            history: self.history.clone(),
            adjacency,
            best_epoch: self.best_epoch,
        })
    }

    pub fn validation_errors(&self) -> gnnad_core::Result<Matrix> {
        self.validation_errors.to_matrix()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads and validates a checkpoint. Wrong format tags, versions and
    /// inconsistent contents are format errors.
    pub fn load(path: &Path) -> Result<(Self, FittedModel)> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let fmt = |msg: String| AppError::format(path, msg);
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))?;
        let header = Header::deserialize(&value).map_err(|e| fmt(e.to_string()))?;
        if header.format != FORMAT {
            return Err(fmt(format!("not a {FORMAT} file")));
        }
        if header.version != u64::from(VERSION) {
            return Err(fmt(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| fmt(e.to_string()))?;
        let model = ckpt.model().map_err(|e| fmt(e.to_string()))?;
        let errors = ckpt.validation_errors().map_err(|e| fmt(e.to_string()))?;
        if errors.cols() != ckpt.sensor_ids.len() || errors.rows() == 0 {
            return Err(fmt("validation errors do not match the sensors".into()));
        }
        Ok((ckpt, model))
    }
}
