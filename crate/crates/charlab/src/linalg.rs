//! Minimal dense numeric kernel shared by every model in the crate.
//!
//! Everything is 64-bit: the oracle-equivalence and gradient-check tests
//! work at tolerances (1e-10 .. 1e-14) that single precision cannot hold.
//! Dimensions stay small (tens of states, ~100 symbols), so the kernels are
//! hand-rolled rather than delegated to a BLAS.

use std::ops::{Index, IndexMut};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(len: usize) -> Self {
        Vector { data: vec![0.0; len] }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Vector { data: (0..len).map(&mut f).collect() }
    }

    /// One-hot indicator of length `len` with a single 1.0 at `hot`.
    pub fn one_hot(len: usize, hot: usize) -> Self {
        let mut v = Vector::zeros(len);
        v.data[hot] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows in matrix literal".into()));
        }
        let n_rows = rows.len();
        let data = rows.into_iter().flatten().collect();
        Ok(Matrix { rows: n_rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Matrix-vector product with 64-bit accumulation.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols() != v.len() {
        return Err(Error::Shape(format!(
            "matvec: matrix is {}x{} but vector has length {}",
            m.rows(),
            m.cols(),
            v.len()
        )));
    }
    let mut out = Vector::zeros(m.rows());
    matvec_into(m, v.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// `out = m * v` without allocation. Shapes are the caller's responsibility.
pub fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols(), v.len());
    debug_assert_eq!(m.rows(), out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), v);
    }
}

/// `out += m * v` without allocation.
pub fn matvec_add_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols(), v.len());
    debug_assert_eq!(m.rows(), out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(m.row(r), v);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += s * a`
pub fn axpy(s: f64, a: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), out.len());
    for (o, x) in out.iter_mut().zip(a) {
        *o += s * x;
    }
}

/// Logistic function, computed branch-wise so that large `|x|` saturates
/// instead of overflowing and `sigmoid(x) + sigmoid(-x) == 1` to the ulp.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function; every output lies in (0, 1).
pub fn sigmoid(v: &Vector) -> Vector {
    Vector::from_fn(v.len(), |i| sigmoid_scalar(v[i]))
}

/// Elementwise hyperbolic tangent; every output lies in (-1, 1).
pub fn tanh_elem(v: &Vector) -> Vector {
    Vector::from_fn(v.len(), |i| v[i].tanh())
}

/// Max-subtracted softmax: positive entries summing to 1, stable for
/// arbitrarily large inputs.
pub fn softmax(v: &Vector) -> Vector {
    let mut out = Vector::zeros(v.len());
    softmax_into(v.as_slice(), out.as_mut_slice());
    out
}

/// Softmax into a caller-provided buffer.
pub fn softmax_into(src: &[f64], out: &mut [f64]) {
    debug_assert_eq!(src.len(), out.len());
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(src) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `ln(sum(exp(xs)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; used to spread seeds and derive sub-streams.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SPLITMIX_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded deterministic random source.
///
/// The generator is ChaCha with 8 rounds keyed via the `seed_from_u64`
/// expansion, so a given 64-bit seed reproduces the same stream on every
/// platform. All derived quantities (floats, bounded integers, shuffles)
/// are built here directly on top of `next_u64`, which keeps the byte
/// stream independent of any external crate's distribution code.
///
/// `derive` produces an independent generator for a sub-component
/// (corpus sampling, parameter init, text generation, ...) by mixing the
/// root seed with a tag through SplitMix64; components can therefore be
/// re-run in isolation from just `(seed, tag)`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Fixed derivation tags, one per consumer of randomness.
pub mod seed_tags {
    pub const CORPUS_SAMPLER: u64 = 1;
    pub const HMM_INIT: u64 = 2;
    pub const LSTM_INIT: u64 = 3;
    pub const HMM_SAMPLE: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const SWEEP_CELL: u64 = 6;
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-component `tag`.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unit-rate exponential draw via inversion.
    pub fn exp1(&mut self) -> f64 {
        -(1.0 - self.next_f64()).ln()
    }

    /// Uniform integer in [0, n), unbiased (rejection on the top range).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Draw an index from an (approximately normalized) probability vector
    /// by walking the cumulative sum. Floating-point residue at the tail
    /// falls back to the last index.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.next_f64();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}
