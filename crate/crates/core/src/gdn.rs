//! Graph-attention forecaster.
//!
//! Each sensor `i` owns an embedding `v_i`. Cosine similarities between
//! embeddings give a top-K directed graph `A`; sensor `i` attends over its
//! in-neighborhood `{j : A_ji = 1}` (which always contains `i`) and the
//! attention-weighted, transformed lag windows feed a small per-node
//! output network.
//!
//! For one window `X` (`n × w`):
//!
//! ```text
//! H  = X Wᵀ                       n × d
//! G  = [V | H]                    n × 2d
//! π  = LeakyReLU(s 1ᵀ + 1 sᵀ),  s = G a
//! α  = row softmax of π over the in-neighborhood
//! Z  = ReLU(α H)
//! ŷ  = ReLU((V ⊙ Z) W1 + b1) w2 + b2
//! ```
//!
//! Aggregation uses the neighbor features `W x_j`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, stream};
use crate::series::{window_dataset, MultivariateSeries, ScalingStats, WindowSample};

/// When the learned graph is rebuilt from the embeddings during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GraphRefresh {
    #[default]
    PerEpoch,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GdnHyperparams {
    pub window: usize,
    pub embed_dim: usize,
    pub top_k: usize,
    pub leaky_slope: f64,
    /// `candidates[i]` lists the sensors allowed as neighbors of `i`.
    /// `None` means every other sensor.
    pub candidates: Option<Vec<Vec<usize>>>,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub graph_refresh: GraphRefresh,
    pub seed: u64,
}

impl Default for GdnHyperparams {
    fn default() -> Self {
        Self {
            window: 3,
            embed_dim: 16,
            top_k: 5,
            leaky_slope: 0.2,
            candidates: None,
            hidden_width: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            graph_refresh: GraphRefresh::PerEpoch,
            seed: 0,
        }
    }
}

impl GdnHyperparams {
    pub fn validate(&self, n_sensors: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k + 1 > n_sensors {
            return Err(Error::TopKOutOfRange {
                k: self.top_k,
                n: n_sensors,
            });
        }
        let positive = [
            ("window", self.window),
            ("embed_dim", self.embed_dim),
            ("hidden_width", self.hidden_width),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::param(
                "leaky_slope",
                format!("must be > 0, got {}", self.leaky_slope),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if let Some(c) = &self.candidates {
            candidate_mask(c, n_sensors)?;
        }
        Ok(())
    }
}

/// `eligible[j * n + i]` is true when `j ∈ C_i`.
fn candidate_mask(candidates: &[Vec<usize>], n: usize) -> Result<Vec<bool>> {
    if candidates.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: candidates.len(),
        });
    }
    let mut eligible = vec![false; n * n];
    for (i, set) in candidates.iter().enumerate() {
        for &j in set {
            if j >= n {
                return Err(Error::param(
                    "candidates",
                    format!("sensor {i} lists unknown sensor {j}"),
                ));
            }
            if j == i {
                return Err(Error::param(
                    "candidates",
                    format!("sensor {i} lists itself"),
                ));
            }
            eligible[j * n + i] = true;
        }
    }
    Ok(eligible)
}

fn full_mask(n: usize) -> Vec<bool> {
    let mut m = vec![true; n * n];
    for i in 0..n {
        m[i * n + i] = false;
    }
    m
}

/// Trainable tensors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GdnParams {
    /// `n × d` sensor embeddings.
    pub v: Matrix,
    /// `d × w` shared lag transform.
    pub w: Matrix,
    /// `2d × 1` attention vector.
    pub a: Matrix,
    /// `d × hidden`.
    pub w1: Matrix,
    /// `1 × hidden`.
    pub b1: Matrix,
    /// `hidden × 1`.
    pub w2: Matrix,
    /// `1 × 1`.
    pub b2: Matrix,
}

/// Names of the parameter blocks in [`GdnParams::blocks`] order.
pub const BLOCK_NAMES: [&str; 7] = ["V", "W", "a", "W1", "b1", "w2", "b2"];

impl GdnParams {
    /// Embeddings `N(0, 1/d)`, everything else uniform in `±1/√fan_in`.
    pub fn init(n_sensors: usize, hp: &GdnHyperparams) -> Result<Self> {
        let (d, w, h) = (hp.embed_dim, hp.window, hp.hidden_width);
        let mut rng = rng::stream_rng(hp.seed, stream::INIT);
        let normal = Normal::new(0.0, 1.0 / libm::sqrt(d as f64))
            .map_err(|_| Error::param("embed_dim", "invalid"))?;
        let v = Matrix::from_fn(n_sensors, d, |_, _| normal.sample(&mut rng));
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let w_m = uniform(d, w, w);
        let a = uniform(2 * d, 1, 2 * d);
        let w1 = uniform(d, h, d);
        let b1 = uniform(1, h, d);
        let w2 = uniform(h, 1, h);
        let b2 = uniform(1, 1, h);
        Ok(Self {
            v,
            w: w_m,
            a,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.v.rows()
    }

    pub fn blocks(&self) -> [&Matrix; 7] {
        [
            &self.v, &self.w, &self.a, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.v,
            &mut self.w,
            &mut self.a,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn to_blocks(&self) -> Vec<Matrix> {
        self.blocks().into_iter().cloned().collect()
    }

    pub fn from_blocks(blocks: &[Matrix]) -> Result<Self> {
        let [v, w, a, w1, b1, w2, b2] = blocks else {
            return Err(Error::LengthMismatch {
                expected: 7,
                found: blocks.len(),
            });
        };
        let p = Self {
            v: v.clone(),
            w: w.clone(),
            a: a.clone(),
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
        };
        p.check_shapes()?;
        Ok(p)
    }

    /// Verifies block shapes are mutually consistent.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.v.cols();
        let h = self.w1.cols();
        let expect = [
            ("W", self.w.rows(), d),
            ("a", self.a.rows(), 2 * d),
            ("a", self.a.cols(), 1),
            ("W1", self.w1.rows(), d),
            ("b1", self.b1.rows(), 1),
            ("b1", self.b1.cols(), h),
            ("w2", self.w2.rows(), h),
            ("w2", self.w2.cols(), 1),
            ("b2", self.b2.len(), 1),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::param(
                    "params",
                    format!("block {name} has dimension {got}, expected {want}"),
                ));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }
}

/// Binary `n × n` adjacency; `get(j, i)` is `A_ji`, i.e. whether `j` is an
/// in-neighbor of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Adjacency {
    n: usize,
    data: Vec<bool>,
}

impl Adjacency {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![false; n * n];
        for i in 0..n {
            data[i * n + i] = true;
        }
        Self { n, data }
    }

    /// From row-major 0/1 entries.
    pub fn from_entries(n: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::LengthMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        if (0..n).any(|i| !data[i * n + i]) {
            return Err(Error::param("adjacency", "diagonal must be 1"));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, i: usize) -> bool {
        self.data[j * self.n + i]
    }

    pub fn entries(&self) -> &[bool] {
        &self.data
    }

    /// `{j : A_ji = 1}`, including `i`.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(j, i)).collect()
    }

    /// Off-diagonal ones in row `j`.
    pub fn out_degree(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| i != j && self.get(j, i)).count()
    }

    /// Attention mask: entry `(i, j)` is `A_ji`.
    fn attention_mask(&self) -> Vec<bool> {
        let n = self.n;
        let mut m = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = self.get(j, i);
            }
        }
        m
    }
}

/// `e_ji = cos(v_i, v_j)` for `j ∈ C_i`, 0 elsewhere (including the
/// diagonal).
pub fn cosine_similarities(v: &Matrix, candidates: Option<&[Vec<usize>]>) -> Result<Matrix> {
    let n = v.rows();
    let eligible = match candidates {
        Some(c) => candidate_mask(c, n)?,
        None => full_mask(n),
    };
    let norms: Vec<f64> = (0..n)
        .map(|i| libm::sqrt(v.row(i).iter().map(|x| x * x).sum()))
        .collect();
    if let Some(i) = norms.iter().position(|&x| x <= 0.0 || !x.is_finite()) {
        return Err(Error::ZeroNormEmbedding(i));
    }
    Ok(Matrix::from_fn(n, n, |j, i| {
        if !eligible[j * n + i] {
            return 0.0;
        }
        let dot: f64 = v.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
        (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
    }))
}

/// Keeps, in every row `j`, the `K` largest eligible `e_ji` (ties to the
/// lowest index) plus the diagonal. Entries outside the candidate sets are
/// never selected, so a row with fewer than `K` candidates keeps them all.
pub fn topk_adjacency(
    e: &Matrix,
    k: usize,
    candidates: Option<&[Vec<usize>]>,
) -> Result<Adjacency> {
    let n = e.rows();
    if e.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "topk_adjacency",
            left: e.shape(),
            right: e.shape(),
        });
    }
    if k == 0 || k + 1 > n {
        return Err(Error::TopKOutOfRange { k, n });
    }
    let eligible = match candidates {
        Some(c) => candidate_mask(c, n)?,
        None => full_mask(n),
    };
    let mut data = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for j in 0..n {
        order.clear();
        order.extend((0..n).filter(|&i| eligible[j * n + i]));
        // stable sort keeps lower indices first among equal scores
        order.sort_by(|&x, &y| e[(j, y)].total_cmp(&e[(j, x)]));
        for &i in order.iter().take(k) {
            data[j * n + i] = true;
        }
        data[j * n + j] = true;
    }
    Ok(Adjacency { n, data })
}

/// Graph built from the current embeddings.
pub fn learn_adjacency(params: &GdnParams, hp: &GdnHyperparams) -> Result<Adjacency> {
    let e = cosine_similarities(&params.v, hp.candidates.as_deref())?;
    topk_adjacency(&e, hp.top_k, hp.candidates.as_deref())
}

/// Similarities, adjacency and the attention of one input window.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedGraph {
    pub similarities: Matrix,
    pub adjacency: Adjacency,
    pub attention: Matrix,
}

/// Tape handles of the parameter blocks.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub v: Var,
    pub w: Var,
    pub a: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ParamVars {
    pub fn record(tape: &mut Tape, p: &GdnParams) -> Self {
        Self::from_slice(&p.blocks().map(|b| tape.leaf(b.clone())))
    }

    /// From seven handles in [`BLOCK_NAMES`] order.
    ///
    /// # Panics
    ///
    /// If `vars` has fewer than seven entries.
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            v: vars[0],
            w: vars[1],
            a: vars[2],
            w1: vars[3],
            b1: vars[4],
            w2: vars[5],
            b2: vars[6],
        }
    }

    fn all(&self) -> [Var; 7] {
        [self.v, self.w, self.a, self.w1, self.b1, self.w2, self.b2]
    }
}

/// Records one forward pass; returns `(ŷ as n × 1, α)`.
pub fn record_forward(
    tape: &mut Tape,
    p: &ParamVars,
    x: Var,
    mask: &[bool],
    slope: f64,
) -> Result<(Var, Var)> {
    let wt = tape.transpose(p.w)?;
    let h = tape.matmul(x, wt)?;
    let g = tape.concat_cols(p.v, h)?;
    let s = tape.matmul(g, p.a)?;
    let pi = tape.outer_sum(s, s)?;
    let pi = tape.leaky_relu(pi, slope)?;
    let alpha = tape.masked_softmax(pi, mask.to_vec())?;
    let agg = tape.matmul(alpha, h)?;
    let z = tape.relu(agg)?;
    let u = tape.mul(p.v, z)?;
    let hid = tape.matmul(u, p.w1)?;
    let hid = tape.add_row(hid, p.b1)?;
    let hid = tape.relu(hid)?;
    let out = tape.matmul(hid, p.w2)?;
    let yhat = tape.add_row(out, p.b2)?;
    Ok((yhat, alpha))
}

/// Records the batch loss `(1/B) Σ_b ‖ŷ_b − y_b‖²`.
pub fn record_loss(
    tape: &mut Tape,
    p: &ParamVars,
    samples: &[&WindowSample],
    adjacency: &Adjacency,
    slope: f64,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::param("batch", "must not be empty"));
    }
    let mask = adjacency.attention_mask();
    let mut total: Option<Var> = None;
    for s in samples {
        let x = tape.leaf(s.input.clone());
        let y = tape.leaf(Matrix::column(&s.target));
        let (yhat, _) = record_forward(tape, p, x, &mask, slope)?;
        let diff = tape.sub(yhat, y)?;
        let sq = tape.sum_squares(diff)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    let total = total.expect("non-empty batch");
    tape.scale(total, 1.0 / samples.len() as f64)
}

fn check_input(params: &GdnParams, adjacency: &Adjacency, x: &Matrix) -> Result<()> {
    let n = params.n_sensors();
    if adjacency.n() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: adjacency.n(),
        });
    }
    if x.shape() != (n, params.w.cols()) {
        return Err(Error::ShapeMismatch {
            op: "attention_forward input",
            left: x.shape(),
            right: (n, params.w.cols()),
        });
    }
    Ok(())
}

/// One prediction `ŷ` and its attention matrix `α`.
pub fn attention_forward(
    params: &GdnParams,
    adjacency: &Adjacency,
    x: &Matrix,
    slope: f64,
) -> Result<(Vec<f64>, Matrix)> {
    check_input(params, adjacency, x)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let (yhat, alpha) = record_forward(&mut tape, &pv, xv, &adjacency.attention_mask(), slope)?;
    if !tape.value(alpha).is_finite() {
        return Err(Error::NonFinite("attention"));
    }
    let y = tape.value(yhat);
    if !y.is_finite() {
        return Err(Error::NonFinite("output"));
    }
    Ok((y.as_slice().to_vec(), tape.value(alpha).clone()))
}

/// Mean over the batch of `‖ŷ − y‖²`.
pub fn loss(
    params: &GdnParams,
    adjacency: &Adjacency,
    samples: &[WindowSample],
    slope: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("batch", "must not be empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let (yhat, _) = attention_forward(params, adjacency, &s.input, slope)?;
        total += yhat
            .iter()
            .zip(&s.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

/// Loss and parameter gradients of one batch.
pub fn loss_and_gradients(
    params: &GdnParams,
    adjacency: &Adjacency,
    samples: &[&WindowSample],
    slope: f64,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params);
    let out = record_loss(&mut tape, &pv, samples, adjacency, slope)?;
    let value = tape.value(out)[(0, 0)];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward_scalar(out)?;
    let blocks = pv
        .all()
        .iter()
        .zip(params.blocks())
        .map(|(&var, b)| {
            grads
                .wrt(var)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(b.rows(), b.cols()))
        })
        .collect();
    Ok((value, blocks))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    fn new(lr: f64, params: &GdnParams) -> Self {
        let zeros: Vec<Matrix> = params
            .blocks()
            .iter()
            .map(|b| Matrix::zeros(b.rows(), b.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, params: &mut GdnParams, grads: &[Matrix]) {
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (k, block) in params.blocks_mut().into_iter().enumerate() {
            let g = grads[k].as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (idx, p) in block.as_mut_slice().iter_mut().enumerate() {
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g[idx];
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * g[idx] * g[idx];
                let mhat = m[idx] / c1;
                let vhat = v[idx] / c2;
                *p -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FittedModel {
    pub params: GdnParams,
    pub hyperparams: GdnHyperparams,
    /// Scaling fitted on the training block; `None` when the model was
    /// trained on data used as-is.
    pub scaling: Option<ScalingStats>,
    pub history: Vec<EpochLoss>,
    /// Graph rebuilt from the best-epoch embeddings.
    pub adjacency: Adjacency,
    pub best_epoch: usize,
}

fn check_samples(samples: &[WindowSample], n: usize, w: usize) -> Result<()> {
    for s in samples {
        if s.input.shape() != (n, w) || s.target.len() != n {
            return Err(Error::ShapeMismatch {
                op: "train sample",
                left: s.input.shape(),
                right: (n, w),
            });
        }
    }
    Ok(())
}

/// Mini-batch Adam with early stopping on validation loss.
///
/// Training stops once the number of consecutive epochs without a strict
/// improvement exceeds `patience`; the best-validation parameters are
/// returned.
pub fn train(
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    hp: &GdnHyperparams,
) -> Result<FittedModel> {
    let first = train_set.first().ok_or(Error::EmptySeries)?;
    if val_set.is_empty() {
        return Err(Error::EmptyValidation);
    }
    let n = first.target.len();
    hp.validate(n)?;
    check_samples(train_set, n, hp.window)?;
    check_samples(val_set, n, hp.window)?;

    let mut params = GdnParams::init(n, hp)?;
    let mut adam = Adam::new(hp.learning_rate, &params);
    let mut shuffle_rng = rng::stream_rng(hp.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, GdnParams, Adjacency, usize)> = None;
    let mut stale = 0usize;

    for epoch in 1..=hp.max_epochs {
        let mut adjacency = learn_adjacency(&params, hp)?;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            if hp.graph_refresh == GraphRefresh::PerBatch {
                adjacency = learn_adjacency(&params, hp)?;
            }
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (value, grads) = loss_and_gradients(&params, &adjacency, &batch, hp.leaky_slope)?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            epoch_total += value * chunk.len() as f64;
            adam.update(&mut params, &grads);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
        }
        let train_loss = epoch_total / train_set.len() as f64;
        let end_adjacency = learn_adjacency(&params, hp)?;
        let val_loss = loss(&params, &end_adjacency, val_set, hp.leaky_slope)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = best.as_ref().is_none_or(|(b, ..)| val_loss < *b);
        if improved {
            best = Some((val_loss, params.clone(), end_adjacency, epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale > hp.patience {
                break;
            }
        }
    }

    let (_, params, adjacency, best_epoch) = best.expect("at least one epoch");
    Ok(FittedModel {
        params,
        hyperparams: hp.clone(),
        scaling: None,
        history,
        adjacency,
        best_epoch,
    })
}

/// Predictions and aligned actuals, both in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `(T − w) × n`.
    pub predictions: Matrix,
    /// `(T − w) × n`.
    pub actuals: Matrix,
    pub ticks: Vec<i64>,
}

impl FittedModel {
    /// The series in model units (scaled when the model carries scaling).
    pub fn prepare(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        match &self.scaling {
            Some(s) => s.apply(series),
            None => Ok(series.clone()),
        }
    }

    /// Similarities, frozen adjacency and the attention for one window.
    pub fn learned_graph(&self, x: &Matrix) -> Result<LearnedGraph> {
        let similarities =
            cosine_similarities(&self.params.v, self.hyperparams.candidates.as_deref())?;
        let (_, attention) =
            attention_forward(&self.params, &self.adjacency, x, self.hyperparams.leaky_slope)?;
        Ok(LearnedGraph {
            similarities,
            adjacency: self.adjacency.clone(),
            attention,
        })
    }
}

/// One-step-ahead predictions for every tick after the first `w`, using the
/// frozen adjacency.
pub fn predict_series(model: &FittedModel, series: &MultivariateSeries) -> Result<Forecast> {
    let n = model.params.n_sensors();
    if series.n_sensors() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: series.n_sensors(),
        });
    }
    let prepared = model.prepare(series)?;
    let samples = window_dataset(&prepared, model.hyperparams.window)?;
    let rows = samples.len();
    let mut predictions = Matrix::zeros(rows, n);
    let mut actuals = Matrix::zeros(rows, n);
    let mut ticks = Vec::with_capacity(rows);
    for (r, s) in samples.iter().enumerate() {
        let (yhat, _) = attention_forward(
            &model.params,
            &model.adjacency,
            &s.input,
            model.hyperparams.leaky_slope,
        )?;
        predictions.row_mut(r).copy_from_slice(&yhat);
        actuals.row_mut(r).copy_from_slice(&s.target);
        ticks.push(s.target_tick);
    }
    Ok(Forecast {
        predictions,
        actuals,
        ticks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use approx::assert_abs_diff_eq;

    fn small_hp(n: usize) -> GdnHyperparams {
        GdnHyperparams {
            window: 2,
            embed_dim: 3,
            top_k: (n - 1).min(2),
            hidden_width: 5,
            seed: 3,
            ..GdnHyperparams::default()
        }
    }

    fn random_input(n: usize, w: usize, seed: u64) -> Matrix {
        let mut r = rng::stream_rng(seed, 99);
        Matrix::from_fn(n, w, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn cosine_basics() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let e = cosine_similarities(&v, None).unwrap();
        assert_abs_diff_eq!(e[(1, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(e[(2, 0)], 0.0);
        assert_eq!(e[(0, 0)], 0.0);
        let c = vec![vec![2], vec![0], vec![0]];
        let e = cosine_similarities(&v, Some(&c)).unwrap();
        assert_eq!(e[(1, 0)], 0.0);
    }

    #[test]
    fn zero_norm_names_sensor() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(cosine_similarities(&v, None), Err(Error::ZeroNormEmbedding(1)));
    }

    #[test]
    fn topk_examples() {
        let e = Matrix::from_rows(&[
            vec![0.0, 0.9, 0.1],
            vec![0.2, 0.0, 0.2],
            vec![0.5, 0.5, 0.0],
        ])
        .unwrap();
        let a = topk_adjacency(&e, 1, None).unwrap();
        assert!(a.get(0, 1) && !a.get(0, 2) && a.get(0, 0));
        // ties go to the lowest index
        assert!(a.get(1, 0) && !a.get(1, 2));
        assert!(a.get(2, 0) && !a.get(2, 1));
        let full = topk_adjacency(&e, 2, None).unwrap();
        assert!(full.entries().iter().all(|&b| b));
        assert!(matches!(topk_adjacency(&e, 3, None), Err(Error::TopKOutOfRange { .. })));
        assert!(matches!(topk_adjacency(&e, 0, None), Err(Error::TopKOutOfRange { .. })));
    }

    #[test]
    fn empty_candidates_give_identity() {
        let v = Matrix::from_fn(4, 3, |i, j| (i + j) as f64 + 1.0);
        let c = vec![Vec::new(); 4];
        let e = cosine_similarities(&v, Some(&c)).unwrap();
        assert_eq!(topk_adjacency(&e, 2, Some(&c)).unwrap(), Adjacency::identity(4));
    }

    #[test]
    fn singleton_neighborhood() {
        let hp = small_hp(4);
        let p = GdnParams::init(4, &hp).unwrap();
        let x = random_input(4, 2, 1);
        let (_, alpha) = attention_forward(&p, &Adjacency::identity(4), &x, 0.2).unwrap();
        assert_eq!(alpha, Matrix::identity(4));
    }

    #[test]
    fn attention_matches_direct_softmax() {
        let n = 4;
        let hp = small_hp(n);
        let p = GdnParams::init(n, &hp).unwrap();
        let adj = learn_adjacency(&p, &hp).unwrap();
        let x = random_input(n, 2, 5);
        let (_, alpha) = attention_forward(&p, &adj, &x, 0.2).unwrap();
        let h = x.matmul(&p.w.transpose()).unwrap();
        let d = p.v.cols();
        let s: Vec<f64> = (0..n)
            .map(|i| {
                (0..d).map(|k| p.v[(i, k)] * p.a[(k, 0)]).sum::<f64>()
                    + (0..d).map(|k| h[(i, k)] * p.a[(d + k, 0)]).sum::<f64>()
            })
            .collect();
        for i in 0..n {
            let nb = adj.in_neighbors(i);
            let pis: Vec<f64> = nb
                .iter()
                .map(|&j| {
                    let z = s[i] + s[j];
                    if z >= 0.0 { z } else { 0.2 * z }
                })
                .collect();
            let total: f64 = pis.iter().map(|v| libm::exp(*v)).sum();
            for (k, &j) in nb.iter().enumerate() {
                assert_abs_diff_eq!(alpha[(i, j)], libm::exp(pis[k]) / total, epsilon = 1e-12);
            }
            let row: f64 = alpha.row(i).iter().sum();
            assert_abs_diff_eq!(row, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn loss_matches_direct_accumulation() {
        let n = 4;
        let hp = small_hp(n);
        let p = GdnParams::init(n, &hp).unwrap();
        let adj = learn_adjacency(&p, &hp).unwrap();
        let samples: Vec<WindowSample> = (0..5)
            .map(|s| WindowSample {
                input: random_input(n, 2, s),
                target: random_input(n, 1, s + 100).into_vec(),
                target_tick: s as i64,
            })
            .collect();
        let mut direct = 0.0;
        for s in &samples {
            let (yhat, _) = attention_forward(&p, &adj, &s.input, 0.2).unwrap();
            for (a, b) in yhat.iter().zip(&s.target) {
                direct += (a - b) * (a - b);
            }
        }
        direct /= 5.0;
        assert_abs_diff_eq!(loss(&p, &adj, &samples, 0.2).unwrap(), direct, epsilon = 1e-12);
        let refs: Vec<&WindowSample> = samples.iter().collect();
        let (taped, _) = loss_and_gradients(&p, &adj, &refs, 0.2).unwrap();
        assert_abs_diff_eq!(taped, direct, epsilon = 1e-12);
    }

    #[test]
    fn full_graph_gradient_check() {
        let n = 4;
        let hp = small_hp(n);
        let p = GdnParams::init(n, &hp).unwrap();
        let adj = learn_adjacency(&p, &hp).unwrap();
        let samples: Vec<WindowSample> = (0..3)
            .map(|s| WindowSample {
                input: random_input(n, 2, s),
                target: random_input(n, 1, s + 50).into_vec(),
                target_tick: s as i64,
            })
            .collect();
        let refs: Vec<&WindowSample> = samples.iter().collect();
        let report = finite_diff_check(
            |tape, ps, _| record_loss(tape, &ParamVars::from_slice(ps), &refs, &adj, 0.2),
            &p.to_blocks(),
            &[],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn linear_rule_series(t: usize) -> MultivariateSeries {
        let mut vals = Matrix::zeros(t, 3);
        let mut r = rng::stream_rng(11, 98);
        for k in 0..t {
            let phase = k as f64 * 0.3;
            vals[(k, 0)] = 0.5 + 0.4 * libm::sin(phase) + 0.02 * r.random_range(-1.0..1.0);
            vals[(k, 1)] = 0.5 + 0.4 * libm::cos(phase);
            vals[(k, 2)] = 0.5 * vals[(k, 0)] + 0.5 * vals[(k, 1)];
        }
        MultivariateSeries::from_values(vals).unwrap()
    }

    fn quick_hp() -> GdnHyperparams {
        GdnHyperparams {
            window: 3,
            embed_dim: 8,
            top_k: 2,
            hidden_width: 16,
            learning_rate: 1e-2,
            batch_size: 8,
            max_epochs: 150,
            patience: 150,
            seed: 4,
            ..GdnHyperparams::default()
        }
    }

    #[test]
    fn overfits_linear_rule() {
        let s = linear_rule_series(60);
        let samples = window_dataset(&s, 3).unwrap();
        let model = train(&samples, &samples[40..], &quick_hp()).unwrap();
        let mse = loss(&model.params, &model.adjacency, &samples, 0.2).unwrap() / 3.0;
        let all: Vec<f64> = samples.iter().flat_map(|s| s.target.clone()).collect();
        let var = crate::stats::variance(&all);
        assert!(mse < 0.1 * var, "mse {mse} var {var}");
    }

    #[test]
    fn training_is_deterministic() {
        let s = linear_rule_series(40);
        let samples = window_dataset(&s, 3).unwrap();
        let hp = GdnHyperparams {
            max_epochs: 5,
            ..quick_hp()
        };
        let a = train(&samples, &samples[30..], &hp).unwrap();
        let b = train(&samples, &samples[30..], &hp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_patience_stops_after_first_stale_epoch() {
        let s = linear_rule_series(40);
        let samples = window_dataset(&s, 3).unwrap();
        let hp = GdnHyperparams {
            patience: 0,
            max_epochs: 200,
            ..quick_hp()
        };
        let m = train(&samples, &samples[30..], &hp).unwrap();
        let h = &m.history;
        assert!(h.len() < 200);
        let last = h.last().unwrap().val_loss;
        let best_before = h[..h.len() - 1].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(last >= best_before);
        assert!(h[..h.len() - 1].windows(2).all(|w| w[1].val_loss < w[0].val_loss));
        assert_eq!(m.best_epoch, h.len() - 1);
    }

    #[test]
    fn predict_shape_and_purity() {
        let s = linear_rule_series(40);
        let samples = window_dataset(&s, 3).unwrap();
        let hp = GdnHyperparams {
            max_epochs: 2,
            ..quick_hp()
        };
        let m = train(&samples, &samples[30..], &hp).unwrap();
        let before = m.clone();
        let f1 = predict_series(&m, &s).unwrap();
        let f2 = predict_series(&m, &s).unwrap();
        assert_eq!(f1.predictions.shape(), (37, 3));
        assert_eq!(f1, f2);
        assert_eq!(m, before);
        assert!(predict_series(&m, &s.slice(0, 3)).is_err());
    }

    #[test]
    fn embedding_scale_keeps_graph() {
        let hp = small_hp(5);
        let mut p = GdnParams::init(5, &hp).unwrap();
        let a = learn_adjacency(&p, &hp).unwrap();
        p.v = p.v.map(|x| 7.5 * x);
        assert_eq!(learn_adjacency(&p, &hp).unwrap(), a);
    }
}
