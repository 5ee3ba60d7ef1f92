//! Dense row-major matrices, the handful of kernels the model needs, loss
//! primitives and a seedable random source.
//!
//! Every reduction runs in ascending index order so that two evaluations of
//! the same inputs produce bit-identical results.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// A single row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} on {} columns",
                bias.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        same_shape(self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    matmul_transposed(a, &b.transpose())
}

/// `a · bᵀ`, the layout used by linear layers whose weights are stored
/// `[out, in]`.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "cannot multiply {:?} by transpose of {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        let orow = &mut out.data[i * b.rows..(i + 1) * b.rows];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `x · wᵀ + b` for a weight stored `[out, in]`.
pub fn linear(x: &Matrix, weight: &Matrix, bias: Option<&[f64]>) -> Result<Matrix> {
    let mut y = matmul_transposed(x, weight)?;
    if let Some(b) = bias {
        y.add_row_broadcast(b)?;
    }
    Ok(y)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub(crate) fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    logits[target] - max - sum.ln()
}

/// Sum of negative log-likelihoods of `targets`, one logit row per target.
pub(crate) fn cross_entropy_sum(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if logits.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    if logits.cols < 2 {
        return Err(Error::Domain("vocabulary must hold at least 2 tokens".into()));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= logits.cols {
            return Err(Error::Range(format!(
                "target id {t} outside vocabulary of {}",
                logits.cols
            )));
        }
        total -= log_softmax_at(logits.row(r), t);
    }
    Ok(total)
}

/// Mean cross-entropy in nats per token.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Domain("no targets".into()));
    }
    Ok(cross_entropy_sum(logits, targets)? / targets.len() as f64)
}

pub(crate) fn squared_error_sum(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b)?;
    let mut acc = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc)
}

pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    let sum = squared_error_sum(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    Ok(sum / a.data.len() as f64)
}

/// `‖a − b‖_F / ‖b‖_F`, the relative change of `a` against reference `b`.
pub fn relative_difference(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = squared_error_sum(a, b)?.sqrt();
    let norm = b.frobenius_norm();
    Ok(if norm == 0.0 { diff } else { diff / norm })
}

/// Seeded ChaCha8 generator with keyed sub-streams.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream derived from the root seed and `(step, key)`.
    /// The parent's own position is not consumed.
    pub fn substream(&self, step: u64, key: u64) -> RandomSource {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // stream 0 belongs to the root source
        rng.set_stream((step << 24 | (key & 0xff_ffff)).wrapping_add(1));
        RandomSource {
            seed: self.seed,
            rng,
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Independent draws `N(mean_i, stddev²)`; `stddev == 0` returns `mean` unchanged.
pub fn gaussian(source: &mut RandomSource, mean: &[f64], stddev: f64) -> Vec<f64> {
    assert!(stddev >= 0.0, "stddev must be non-negative");
    if stddev == 0.0 {
        return mean.to_vec();
    }
    mean.iter()
        .map(|&m| m + stddev * source.standard_normal())
        .collect()
}
