//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass in evaluation
//! order; [`Tape::backward`] walks it in reverse and accumulates gradients
//! for every recorded node. The op set is exactly what the graph-attention
//! forecaster needs.
//!
//! ```
//! use gnnad_core::autodiff::Tape;
//! use gnnad_core::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::filled(1, 1, 3.0));
//! let y = tape.mul(x, x).unwrap();
//! assert_eq!(tape.value(y)[(0, 0)], 9.0);
//! let grads = tape.backward_scalar(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap()[(0, 0)], 6.0);
//! ```
//!
//! ReLU and LeakyReLU use the right derivative at 0. Softmax subtracts the
//! row maximum before exponentiating.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    /// `a + 1·b` with `b` a single row.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ConcatCols(usize, usize),
    /// `u_i + v_j` from two column vectors.
    OuterSum(usize, usize),
    LeakyRelu(usize, f64),
    Relu(usize),
    /// Row-wise softmax over the `true` entries; other entries are 0.
    MaskedSoftmax(usize, Vec<bool>),
    SumSquares(usize),
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded forward pass. Inputs of every node precede it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn get(&self, v: Var) -> Result<&Matrix> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVariable(v.0))
    }

    /// Value of a recorded node.
    ///
    /// # Panics
    ///
    /// If `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Records a parameter or input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.get(a)?.matmul(self.get(b)?)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.get(a)?.transpose();
        Ok(self.push(value, Op::Transpose(a.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        same_shape("add", x, y)?;
        let value = zip_with(x, y, |p, q| p + q);
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.get(a)?, self.get(row)?);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + r[(0, j)]);
        Ok(self.push(value, Op::AddRow(a.0, row.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        same_shape("sub", x, y)?;
        let value = zip_with(x, y, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        same_shape("mul", x, y)?;
        let value = zip_with(x, y, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.get(a)?.map(|x| c * x);
        Ok(self.push(value, Op::Scale(a.0, c)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        if x.rows() != y.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let (cx, cy) = (x.cols(), y.cols());
        let value = Matrix::from_fn(x.rows(), cx + cy, |i, j| {
            if j < cx {
                x[(i, j)]
            } else {
                y[(i, j - cx)]
            }
        });
        Ok(self.push(value, Op::ConcatCols(a.0, b.0)))
    }

    /// `out[i][j] = u[i] + v[j]` for column vectors `u` and `v`.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (x, y) = (self.get(u)?, self.get(v)?);
        if x.cols() != 1 || y.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer_sum",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let value = Matrix::from_fn(x.rows(), y.rows(), |i, j| x[(i, 0)] + y[(j, 0)]);
        Ok(self.push(value, Op::OuterSum(u.0, v.0)))
    }

    /// `max(slope·x, x)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self
            .get(a)?
            .map(|x| if x >= 0.0 { x } else { slope * x });
        Ok(self.push(value, Op::LeakyRelu(a.0, slope)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.get(a)?.map(|x| x.max(0.0));
        Ok(self.push(value, Op::Relu(a.0)))
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `a`).
    /// Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let x = self.get(a)?;
        if mask.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: x.shape(),
                right: (mask.len(), 1),
            });
        }
        let cols = x.cols();
        let mut value = Matrix::zeros(x.rows(), cols);
        for i in 0..x.rows() {
            let row_mask = &mask[i * cols..(i + 1) * cols];
            if x.row(i).iter().zip(row_mask).any(|(v, &m)| m && !v.is_finite()) {
                return Err(Error::NonFinite("masked_softmax"));
            }
            let max = x
                .row(i)
                .iter()
                .zip(row_mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::param(
                    "mask",
                    format!("row {i} of masked_softmax has no active entries"),
                ));
            }
            let mut total = 0.0;
            for j in 0..cols {
                if row_mask[j] {
                    let e = libm::exp(x[(i, j)] - max);
                    value[(i, j)] = e;
                    total += e;
                }
            }
            for v in value.row_mut(i) {
                *v /= total;
            }
        }
        Ok(self.push(value, Op::MaskedSoftmax(a.0, mask)))
    }

    /// `Σ x²` as a `1 × 1` matrix.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.get(a)?.as_slice().iter().map(|x| x * x).sum();
        Ok(self.push(Matrix::filled(1, 1, s), Op::SumSquares(a.0)))
    }

    /// `Σ x` as a `1 × 1` matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.get(a)?.as_slice().iter().sum();
        Ok(self.push(Matrix::filled(1, 1, s), Op::Sum(a.0)))
    }

    /// Backward pass from a `1 × 1` output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, Matrix::filled(1, 1, 1.0))
    }

    /// Propagates `seed` (same shape as `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        let out_value = self.get(output)?;
        same_shape("backward seed", out_value, &seed)?;
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (acc, &v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *r, gr);
                }
                Op::Sub(a, b) => {
                    let neg = g.map(|x| -x);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = zip_with(&g, bv, |p, q| p * q);
                    let gb = zip_with(&g, av, |p, q| p * q);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| c * x));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let ga = Matrix::from_fn(g.rows(), ca, |i, j| g[(i, j)]);
                    let gb = Matrix::from_fn(g.rows(), cb, |i, j| g[(i, ca + j)]);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::OuterSum(u, v) => {
                    let gu = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    let gv = Matrix::from_fn(g.cols(), 1, |j, _| {
                        (0..g.rows()).map(|i| g[(i, j)]).sum()
                    });
                    accumulate(&mut grads, *u, gu);
                    accumulate(&mut grads, *v, gv);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let ga = zip_with(&g, &self.nodes[*a].value, |gi, x| {
                        if x >= 0.0 {
                            gi
                        } else {
                            slope * gi
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_with(&g, &self.nodes[*a].value, |gi, x| {
                        if x >= 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut ga = Matrix::zeros(y.rows(), cols);
                    for i in 0..y.rows() {
                        let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            if mask[i * cols + j] {
                                ga[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let s = g[(0, 0)];
                    let ga = self.nodes[*a].value.map(|x| 2.0 * s * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads, *a, Matrix::filled(av.rows(), av.cols(), g[(0, 0)]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass, kept for leaf nodes.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the output does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// One recorded forward pass with its parameter and input handles.
#[derive(Debug, Clone)]
pub struct Recording {
    pub tape: Tape,
    pub output: Var,
    pub params: Vec<Var>,
    pub inputs: Vec<Var>,
}

impl Recording {
    pub fn value(&self) -> &Matrix {
        self.tape.value(self.output)
    }

    /// Gradients of a scalar output with respect to each parameter block,
    /// zero-filled for blocks the output does not depend on.
    pub fn param_gradients(&self) -> Result<Vec<Matrix>> {
        let grads = self.tape.backward_scalar(self.output)?;
        Ok(self
            .params
            .iter()
            .map(|&p| {
                grads.wrt(p).cloned().unwrap_or_else(|| {
                    let v = self.tape.value(p);
                    Matrix::zeros(v.rows(), v.cols())
                })
            })
            .collect())
    }
}

/// Records `graph` on a fresh tape with the given parameter and input
/// values as leaves.
pub fn forward<F>(graph: F, params: &[Matrix], inputs: &[Matrix]) -> Result<Recording>
where
    F: FnOnce(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let params: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let inputs: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
    let output = graph(&mut tape, &params, &inputs)?;
    Ok(Recording {
        tape,
        output,
        params,
        inputs,
    })
}

/// Per-block outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error in each parameter block.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Floor for the relative-error denominator, as a fraction of the output
/// magnitude. Keeps cancellation noise in near-zero gradients from reading
/// as large relative errors.
const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of a scalar graph against central
/// differences with step `step`. An entry's error is
/// `|g − g_fd| / max(|g|, |g_fd|, 1e-6·max(1, |f|))`; a block passes when
/// its largest error is strictly below `tolerance`.
pub fn finite_diff_check<F>(
    graph: F,
    params: &[Matrix],
    inputs: &[Matrix],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    let rec = forward(&graph, params, inputs)?;
    let out = rec.value();
    if out.shape() != (1, 1) {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check output",
            left: out.shape(),
            right: (1, 1),
        });
    }
    let f0 = out[(0, 0)];
    let floor = REL_FLOOR * libm::fabs(f0).max(1.0);
    let analytic = rec.param_gradients()?;

    let eval = |ps: &[Matrix]| -> Result<f64> { Ok(forward(&graph, ps, inputs)?.value()[(0, 0)]) };
    let mut perturbed: Vec<Matrix> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (b, block) in params.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..block.len() {
            let orig = block.as_slice()[k];
            perturbed[b].as_mut_slice()[k] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[b].as_mut_slice()[k] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[b].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[b].as_slice()[k];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(floor);
            worst = worst.max(libm::fabs(a - numeric) / denom);
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tolerance);
    Ok(GradCheckReport {
        max_rel_error,
        tolerance,
        passed,
    })
}
