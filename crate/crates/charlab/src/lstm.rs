//! Character-level LSTM language model built from scratch: gated cell,
//! cross-entropy loss, exact backpropagation through time, SGD/Adam with
//! global-norm clipping, the training loop, and sampling.
//!
//! The cell follows the usual gate equations with one deliberate twist: the
//! output combination `h_t = o_t * tanh(c_t)` is the default, but a
//! `PaperFaithful` mode computes `h_t = o_t * tanh(c_{t-1})` instead. Both
//! modes are differentiated exactly; the gradient check covers each.
//!
//! Inputs are one-hot characters, so every input-weight product is a column
//! lookup rather than a matrix-vector product.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, EpochSampler, WindowSet};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::linalg::{self, seed_tags, Matrix, Rng, Vector};

/// Windows per work unit for batch-gradient and evaluation parallelism.
/// Fixed chunk boundaries keep the reduction order, and therefore the
/// result bits, independent of the worker count.
const GRAD_CHUNK: usize = 8;
const EVAL_CHUNK: usize = 64;

/// How `h_t` is combined from the output gate and the cell state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputGateMode {
    /// `h_t = o_t * tanh(c_t)`
    Standard,
    /// `h_t = o_t * tanh(c_{t-1})`
    PaperFaithful,
}

impl OutputGateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputGateMode::Standard => "standard",
            OutputGateMode::PaperFaithful => "paper-faithful",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(OutputGateMode::Standard),
            "paper-faithful" => Ok(OutputGateMode::PaperFaithful),
            other => Err(Error::Config(format!(
                "unknown output-gate mode {other:?} (expected \"standard\" or \"paper-faithful\")"
            ))),
        }
    }
}

/// Full parameter set: four input-weight matrices (n_h x nu), four
/// recurrent matrices (n_h x n_h), seven gate biases, and the output
/// projection to nu logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub n_h: usize,
    pub nu: usize,
    pub w_ii: Matrix,
    pub w_if: Matrix,
    pub w_ig: Matrix,
    pub w_io: Matrix,
    pub w_hi: Matrix,
    pub w_hf: Matrix,
    pub w_hg: Matrix,
    pub w_ho: Matrix,
    pub b_ii: Vector,
    pub b_hi: Vector,
    pub b_if: Vector,
    pub b_hf: Vector,
    pub b_ig: Vector,
    pub b_hg: Vector,
    pub b_o: Vector,
    pub w_out: Matrix,
    pub b_out: Vector,
}

/// Serialization / optimizer traversal order for the parameter tensors.
pub const TENSOR_NAMES: [&str; 17] = [
    "W_ii", "W_if", "W_ig", "W_io", "W_hi", "W_hf", "W_hg", "W_ho", "b_ii", "b_hi", "b_if",
    "b_hf", "b_ig", "b_hg", "b_o", "W_out", "b_out",
];

impl LstmParams {
    /// Weights uniform on (-1/sqrt(n_h), +1/sqrt(n_h)); biases zero except
    /// the two forget biases, which are set so their sum is +1 (the forget
    /// gate starts mostly open).
    pub fn init(n_h: usize, nu: usize, rng: &mut Rng) -> Self {
        assert!(n_h >= 1 && nu >= 1);
        let s = 1.0 / (n_h as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| Matrix::from_fn(rows, cols, |_, _| rng.uniform(-s, s));
        let w_ii = mat(n_h, nu);
        let w_if = mat(n_h, nu);
        let w_ig = mat(n_h, nu);
        let w_io = mat(n_h, nu);
        let w_hi = mat(n_h, n_h);
        let w_hf = mat(n_h, n_h);
        let w_hg = mat(n_h, n_h);
        let w_ho = mat(n_h, n_h);
        let w_out = mat(nu, n_h);
        LstmParams {
            n_h,
            nu,
            w_ii,
            w_if,
            w_ig,
            w_io,
            w_hi,
            w_hf,
            w_hg,
            w_ho,
            b_ii: Vector::zeros(n_h),
            b_hi: Vector::zeros(n_h),
            b_if: Vector::from_fn(n_h, |_| 0.5),
            b_hf: Vector::from_fn(n_h, |_| 0.5),
            b_ig: Vector::zeros(n_h),
            b_hg: Vector::zeros(n_h),
            b_o: Vector::zeros(n_h),
            w_out,
            b_out: Vector::zeros(nu),
        }
    }

    pub fn zeros(n_h: usize, nu: usize) -> Self {
        LstmParams {
            n_h,
            nu,
            w_ii: Matrix::zeros(n_h, nu),
            w_if: Matrix::zeros(n_h, nu),
            w_ig: Matrix::zeros(n_h, nu),
            w_io: Matrix::zeros(n_h, nu),
            w_hi: Matrix::zeros(n_h, n_h),
            w_hf: Matrix::zeros(n_h, n_h),
            w_hg: Matrix::zeros(n_h, n_h),
            w_ho: Matrix::zeros(n_h, n_h),
            b_ii: Vector::zeros(n_h),
            b_hi: Vector::zeros(n_h),
            b_if: Vector::zeros(n_h),
            b_hf: Vector::zeros(n_h),
            b_ig: Vector::zeros(n_h),
            b_hg: Vector::zeros(n_h),
            b_o: Vector::zeros(n_h),
            w_out: Matrix::zeros(nu, n_h),
            b_out: Vector::zeros(nu),
        }
    }

    /// Tensor slices in `TENSOR_NAMES` order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("W_ii", self.w_ii.data()),
            ("W_if", self.w_if.data()),
            ("W_ig", self.w_ig.data()),
            ("W_io", self.w_io.data()),
            ("W_hi", self.w_hi.data()),
            ("W_hf", self.w_hf.data()),
            ("W_hg", self.w_hg.data()),
            ("W_ho", self.w_ho.data()),
            ("b_ii", self.b_ii.as_slice()),
            ("b_hi", self.b_hi.as_slice()),
            ("b_if", self.b_if.as_slice()),
            ("b_hf", self.b_hf.as_slice()),
            ("b_ig", self.b_ig.as_slice()),
            ("b_hg", self.b_hg.as_slice()),
            ("b_o", self.b_o.as_slice()),
            ("W_out", self.w_out.data()),
            ("b_out", self.b_out.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("W_ii", self.w_ii.data_mut()),
            ("W_if", self.w_if.data_mut()),
            ("W_ig", self.w_ig.data_mut()),
            ("W_io", self.w_io.data_mut()),
            ("W_hi", self.w_hi.data_mut()),
            ("W_hf", self.w_hf.data_mut()),
            ("W_hg", self.w_hg.data_mut()),
            ("W_ho", self.w_ho.data_mut()),
            ("b_ii", self.b_ii.as_mut_slice()),
            ("b_hi", self.b_hi.as_mut_slice()),
            ("b_if", self.b_if.as_mut_slice()),
            ("b_hf", self.b_hf.as_mut_slice()),
            ("b_ig", self.b_ig.as_mut_slice()),
            ("b_hg", self.b_hg.as_mut_slice()),
            ("b_o", self.b_o.as_mut_slice()),
            ("W_out", self.w_out.data_mut()),
            ("b_out", self.b_out.as_mut_slice()),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Serialize as an `lstm-v1` JSON document (17-significant-digit
    /// decimals, one array per tensor, matrices as row arrays).
    pub fn to_json(&self, mode: OutputGateMode, vocab_ref: &str, extra: &[(&str, String)]) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        s.push_str("  \"format\": \"lstm-v1\",\n");
        s.push_str(&format!("  \"n_h\": {},\n", self.n_h));
        s.push_str(&format!("  \"nu\": {},\n", self.nu));
        s.push_str(&format!("  \"mode\": \"{}\"", mode.as_str()));
        let mats = [
            ("W_ii", &self.w_ii),
            ("W_if", &self.w_if),
            ("W_ig", &self.w_ig),
            ("W_io", &self.w_io),
            ("W_hi", &self.w_hi),
            ("W_hf", &self.w_hf),
            ("W_hg", &self.w_hg),
            ("W_ho", &self.w_ho),
            ("W_out", &self.w_out),
        ];
        for (name, m) in mats {
            s.push_str(&format!(",\n  \"{name}\": "));
            jsonfmt::push_matrix(&mut s, m);
        }
        let vecs = [
            ("b_ii", &self.b_ii),
            ("b_hi", &self.b_hi),
            ("b_if", &self.b_if),
            ("b_hf", &self.b_hf),
            ("b_ig", &self.b_ig),
            ("b_hg", &self.b_hg),
            ("b_o", &self.b_o),
            ("b_out", &self.b_out),
        ];
        for (name, v) in vecs {
            s.push_str(&format!(",\n  \"{name}\": "));
            jsonfmt::push_f64_array(&mut s, v.as_slice());
        }
        s.push_str(&format!(
            ",\n  \"vocab_ref\": {}",
            serde_json::to_string(vocab_ref).expect("string serializes")
        ));
        for (k, v) in extra {
            s.push_str(&format!(",\n  \"{k}\": {v}"));
        }
        s.push_str("\n}\n");
        s
    }

    /// Parse an `lstm-v1` document; returns params, output-gate mode and
    /// the vocabulary manifest hash.
    pub fn from_json(json: &str) -> Result<(Self, OutputGateMode, String)> {
        let v: serde_json::Value = serde_json::from_str(json)
            .map_err(|e| Error::ModelFile(format!("invalid JSON: {e}")))?;
        let format = jsonfmt::get_str(&v, "format")?;
        if format != "lstm-v1" {
            return Err(Error::ModelFile(format!(
                "expected format \"lstm-v1\", found {format:?}"
            )));
        }
        let n_h = jsonfmt::get_usize(&v, "n_h")?;
        let nu = jsonfmt::get_usize(&v, "nu")?;
        if n_h == 0 || nu == 0 {
            return Err(Error::ModelFile("n_h and nu must be >= 1".into()));
        }
        let mode = OutputGateMode::parse(jsonfmt::get_str(&v, "mode")?)
            .map_err(|e| Error::ModelFile(e.to_string()))?;
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            jsonfmt::parse_matrix(jsonfmt::get(&v, name)?, name, rows, cols)
        };
        let vec = |name: &str, len: usize| -> Result<Vector> {
            jsonfmt::parse_vector(jsonfmt::get(&v, name)?, name, len)
        };
        let params = LstmParams {
            n_h,
            nu,
            w_ii: mat("W_ii", n_h, nu)?,
            w_if: mat("W_if", n_h, nu)?,
            w_ig: mat("W_ig", n_h, nu)?,
            w_io: mat("W_io", n_h, nu)?,
            w_hi: mat("W_hi", n_h, n_h)?,
            w_hf: mat("W_hf", n_h, n_h)?,
            w_hg: mat("W_hg", n_h, n_h)?,
            w_ho: mat("W_ho", n_h, n_h)?,
            b_ii: vec("b_ii", n_h)?,
            b_hi: vec("b_hi", n_h)?,
            b_if: vec("b_if", n_h)?,
            b_hf: vec("b_hf", n_h)?,
            b_ig: vec("b_ig", n_h)?,
            b_hg: vec("b_hg", n_h)?,
            b_o: vec("b_o", n_h)?,
            w_out: mat("W_out", nu, n_h)?,
            b_out: vec("b_out", nu)?,
        };
        if !params.all_finite() {
            return Err(Error::ModelFile("model contains non-finite parameters".into()));
        }
        let vocab_ref = jsonfmt::get_str(&v, "vocab_ref")?.to_string();
        Ok((params, mode, vocab_ref))
    }
}

/// Recurrent state (h, c), both length n_h.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub c: Vector,
}

impl CellState {
    pub fn zeros(n_h: usize) -> Self {
        CellState { h: Vector::zeros(n_h), c: Vector::zeros(n_h) }
    }
}

/// Everything BPTT needs about one timestep.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Input symbol index (the one-hot coordinate of x_t).
    pub x: usize,
    pub f: Vector,
    pub i: Vector,
    pub g: Vector,
    pub o: Vector,
    pub c_prev: Vector,
    pub c: Vector,
    pub h_prev: Vector,
    /// tanh(c_t) in standard mode, tanh(c_{t-1}) in paper-faithful mode.
    pub tanh_c: Vector,
    pub logits: Vector,
}

/// One cell step from a symbol index. Reads `h_prev`/`c_prev`, fills the
/// cache vectors in place.
fn step_into(params: &LstmParams, x: usize, h_prev: &[f64], c_prev: &[f64], mode: OutputGateMode, cache: &mut StepCache) {
    let n = params.n_h;
    let nu = params.nu;
    debug_assert!(x < nu);

    let f = cache.f.as_mut_slice();
    let i_ = cache.i.as_mut_slice();
    let g = cache.g.as_mut_slice();
    let o = cache.o.as_mut_slice();
    for j in 0..n {
        let zf = params.b_if[j] + params.b_hf[j] + params.w_if.row(j)[x] + linalg::dot(params.w_hf.row(j), h_prev);
        let zi = params.b_ii[j] + params.b_hi[j] + params.w_ii.row(j)[x] + linalg::dot(params.w_hi.row(j), h_prev);
        let zg = params.b_ig[j] + params.b_hg[j] + params.w_ig.row(j)[x] + linalg::dot(params.w_hg.row(j), h_prev);
        let zo = params.b_o[j] + params.w_io.row(j)[x] + linalg::dot(params.w_ho.row(j), h_prev);
        f[j] = linalg::sigmoid_scalar(zf);
        i_[j] = linalg::sigmoid_scalar(zi);
        g[j] = zg.tanh();
        o[j] = linalg::sigmoid_scalar(zo);
    }

    let c = cache.c.as_mut_slice();
    let tanh_c = cache.tanh_c.as_mut_slice();
    for j in 0..n {
        c[j] = f[j] * c_prev[j] + i_[j] * g[j];
        tanh_c[j] = match mode {
            OutputGateMode::Standard => c[j].tanh(),
            OutputGateMode::PaperFaithful => c_prev[j].tanh(),
        };
    }

    cache.x = x;
    cache.c_prev.as_mut_slice().copy_from_slice(c_prev);
    cache.h_prev.as_mut_slice().copy_from_slice(h_prev);

    // h_t = o_t * tanh-term; logits = W_out h_t + b_out
    let mut h = vec![0.0; n];
    for j in 0..n {
        h[j] = o[j] * tanh_c[j];
    }
    let logits = cache.logits.as_mut_slice();
    logits.copy_from_slice(params.b_out.as_slice());
    for (k, lo) in logits.iter_mut().enumerate() {
        *lo += linalg::dot(params.w_out.row(k), &h);
    }
}

fn empty_cache(n_h: usize, nu: usize) -> StepCache {
    StepCache {
        x: 0,
        f: Vector::zeros(n_h),
        i: Vector::zeros(n_h),
        g: Vector::zeros(n_h),
        o: Vector::zeros(n_h),
        c_prev: Vector::zeros(n_h),
        c: Vector::zeros(n_h),
        h_prev: Vector::zeros(n_h),
        tanh_c: Vector::zeros(n_h),
        logits: Vector::zeros(nu),
    }
}

fn cache_h(cache: &StepCache) -> Vector {
    Vector::from_fn(cache.o.len(), |j| cache.o[j] * cache.tanh_c[j])
}

/// One LSTM step on a one-hot input vector.
pub fn cell_step(
    params: &LstmParams,
    x_t: &Vector,
    prev: &CellState,
    mode: OutputGateMode,
) -> Result<(CellState, StepCache)> {
    if x_t.len() != params.nu {
        return Err(Error::Shape(format!(
            "input has length {}, expected nu={}",
            x_t.len(),
            params.nu
        )));
    }
    if prev.h.len() != params.n_h || prev.c.len() != params.n_h {
        return Err(Error::Shape("previous state does not match n_h".into()));
    }
    let mut hot = None;
    for (k, &v) in x_t.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        if v != 1.0 || hot.is_some() {
            return Err(Error::Shape("x_t must be one-hot".into()));
        }
        hot = Some(k);
    }
    let x = hot.ok_or_else(|| Error::Shape("x_t must be one-hot".into()))?;

    let mut cache = empty_cache(params.n_h, params.nu);
    step_into(params, x, prev.h.as_slice(), prev.c.as_slice(), mode, &mut cache);
    let state = CellState { h: cache_h(&cache), c: cache.c.clone() };
    Ok((state, cache))
}

/// Run a symbol sequence from the zero state. Returns the per-step logit
/// matrix (T x nu), the step caches, and the final state.
pub fn forward_sequence(
    params: &LstmParams,
    inputs: &[usize],
    mode: OutputGateMode,
) -> Result<(Matrix, Vec<StepCache>, CellState)> {
    let caches = forward_cached(params, inputs, mode)?;
    let mut logits = Matrix::zeros(inputs.len(), params.nu);
    for (t, cache) in caches.iter().enumerate() {
        logits.row_mut(t).copy_from_slice(cache.logits.as_slice());
    }
    let last = caches.last().expect("nonempty");
    let state = CellState { h: cache_h(last), c: last.c.clone() };
    Ok((logits, caches, state))
}

fn check_inputs(params: &LstmParams, inputs: &[usize]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if let Some((t, &x)) = inputs.iter().enumerate().find(|(_, &x)| x >= params.nu) {
        return Err(Error::Shape(format!(
            "symbol {x} at position {t} out of range (nu={})",
            params.nu
        )));
    }
    Ok(())
}

fn forward_cached(params: &LstmParams, inputs: &[usize], mode: OutputGateMode) -> Result<Vec<StepCache>> {
    check_inputs(params, inputs)?;
    let n = params.n_h;
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut caches = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let mut cache = empty_cache(n, params.nu);
        step_into(params, x, &h, &c, mode, &mut cache);
        for j in 0..n {
            h[j] = cache.o[j] * cache.tanh_c[j];
        }
        c.copy_from_slice(cache.c.as_slice());
        caches.push(cache);
    }
    Ok(caches)
}

/// Mean negative log-likelihood (nats per character), log-sum-exp stable.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Shape("no targets".into()));
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        if y >= row.len() {
            return Err(Error::Shape(format!("target {y} out of range (nu={})", row.len())));
        }
        total += linalg::log_sum_exp(row) - row[y];
    }
    Ok(total / targets.len() as f64)
}

/// `L(theta) = -J(theta)`: the log-likelihood counterpart of the loss.
pub fn log_likelihood(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    Ok(-cross_entropy(logits, targets)?)
}

/// Gradients, one tensor per parameter tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: LstmParams,
}

impl Gradients {
    pub fn zeros(n_h: usize, nu: usize) -> Self {
        Gradients { params: LstmParams::zeros(n_h, nu) }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        self.params.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        self.params.tensors_mut()
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Exact gradients of the mean cross-entropy over the sequence with respect
/// to every parameter, including the cell-state recurrence through the
/// forget gate and, in paper-faithful mode, the extra `tanh(c_{t-1})`
/// dependency of the output combination.
pub fn backward_bptt(
    params: &LstmParams,
    caches: &[StepCache],
    targets: &[usize],
    mode: OutputGateMode,
) -> Result<Gradients> {
    if caches.is_empty() {
        return Err(Error::Shape("no cached steps to backpropagate".into()));
    }
    if caches.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} cached steps for {} targets",
            caches.len(),
            targets.len()
        )));
    }
    let n = params.n_h;
    let nu = params.nu;
    let t_len = caches.len();
    let inv_t = 1.0 / t_len as f64;

    let mut grads = Gradients::zeros(n, nu);
    let mut dh = vec![0.0; n];
    let mut dh_carry = vec![0.0; n];
    let mut dc_carry = vec![0.0; n];
    let mut dlogits = vec![0.0; nu];
    let mut dzf = vec![0.0; n];
    let mut dzi = vec![0.0; n];
    let mut dzg = vec![0.0; n];
    let mut dzo = vec![0.0; n];
    let mut h_t = vec![0.0; n];

    for t in (0..t_len).rev() {
        let cache = &caches[t];
        let y = targets[t];
        if y >= nu {
            return Err(Error::Shape(format!("target {y} out of range (nu={nu})")));
        }

        // d mean-loss / d logits = (softmax - onehot) / T
        linalg::softmax_into(cache.logits.as_slice(), &mut dlogits);
        dlogits[y] -= 1.0;
        for d in dlogits.iter_mut() {
            *d *= inv_t;
        }

        for j in 0..n {
            h_t[j] = cache.o[j] * cache.tanh_c[j];
        }

        // output projection: W_out, b_out, and dL/dh_t
        dh.copy_from_slice(&dh_carry);
        for k in 0..nu {
            let dk = dlogits[k];
            grads.params.b_out[k] += dk;
            linalg::axpy(dk, &h_t, grads.params.w_out.row_mut(k));
            linalg::axpy(dk, params.w_out.row(k), &mut dh);
        }

        // gate-local derivatives
        for j in 0..n {
            let tc = cache.tanh_c[j];
            let o = cache.o[j];
            let dtanh = 1.0 - tc * tc;

            let dc = match mode {
                OutputGateMode::Standard => dh[j] * o * dtanh + dc_carry[j],
                OutputGateMode::PaperFaithful => dc_carry[j],
            };

            let do_ = dh[j] * tc;
            dzo[j] = do_ * o * (1.0 - o);

            let f = cache.f[j];
            let i_ = cache.i[j];
            let g = cache.g[j];
            dzf[j] = dc * cache.c_prev[j] * f * (1.0 - f);
            dzi[j] = dc * g * i_ * (1.0 - i_);
            dzg[j] = dc * i_ * (1.0 - g * g);

            // carry into step t-1 through the cell-state path
            dc_carry[j] = dc * f;
            if mode == OutputGateMode::PaperFaithful {
                // h_t also reads tanh(c_{t-1})
                dc_carry[j] += dh[j] * o * dtanh;
            }
        }

        // parameter gradients and the hidden-state carry
        let x = cache.x;
        let h_prev = cache.h_prev.as_slice();
        dh_carry.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            grads.params.w_if.row_mut(j)[x] += dzf[j];
            grads.params.w_ii.row_mut(j)[x] += dzi[j];
            grads.params.w_ig.row_mut(j)[x] += dzg[j];
            grads.params.w_io.row_mut(j)[x] += dzo[j];
            linalg::axpy(dzf[j], h_prev, grads.params.w_hf.row_mut(j));
            linalg::axpy(dzi[j], h_prev, grads.params.w_hi.row_mut(j));
            linalg::axpy(dzg[j], h_prev, grads.params.w_hg.row_mut(j));
            linalg::axpy(dzo[j], h_prev, grads.params.w_ho.row_mut(j));
            grads.params.b_if[j] += dzf[j];
            grads.params.b_hf[j] += dzf[j];
            grads.params.b_ii[j] += dzi[j];
            grads.params.b_hi[j] += dzi[j];
            grads.params.b_ig[j] += dzg[j];
            grads.params.b_hg[j] += dzg[j];
            grads.params.b_o[j] += dzo[j];

            linalg::axpy(dzf[j], params.w_hf.row(j), &mut dh_carry);
            linalg::axpy(dzi[j], params.w_hi.row(j), &mut dh_carry);
            linalg::axpy(dzg[j], params.w_hg.row(j), &mut dh_carry);
            linalg::axpy(dzo[j], params.w_ho.row(j), &mut dh_carry);
        }
    }

    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected \"sgd\" or \"adam\")"
            ))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Global-norm clipping followed by an SGD or Adam update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: f64, template: &LstmParams) -> Self {
        let shapes: Vec<usize> = template.tensors().iter().map(|(_, t)| t.len()).collect();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (
                shapes.iter().map(|&n| vec![0.0; n]).collect(),
                shapes.iter().map(|&n| vec![0.0; n]).collect(),
            ),
        };
        Optimizer { kind, lr, clip, m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Scale the gradient to global norm `clip` when it exceeds it, then
    /// update the parameters in place.
    pub fn clip_and_apply(&mut self, params: &mut LstmParams, grads: &Gradients) -> Result<()> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient (norm {norm}) at optimizer step {}",
                self.step
            )));
        }
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= self.lr * scale * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1t = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let b2t = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for (((_, p), (_, g)), (m, v)) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for k in 0..p.len() {
                        let gv = scale * g[k];
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gv;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = m[k] / b1t;
                        let v_hat = v[k] / b2t;
                        p[k] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_h: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    pub epochs: usize,
    pub w: usize,
    pub m: usize,
    pub seed: u64,
    pub mode: OutputGateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_h: 50,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            clip: 5.0,
            epochs: 5,
            w: crate::corpus::DEFAULT_WINDOW_WIDTH,
            m: crate::corpus::DEFAULT_BATCH_SIZE,
            seed: 0,
            mode: OutputGateMode::Standard,
        }
    }
}

/// Per-epoch loss record. Epoch 0 is the untrained model, so it carries
/// only a validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_j: Option<f64>,
    pub val_j: f64,
}

/// Mean loss and gradient of the mean loss over the picked windows.
/// Window gradients are accumulated in fixed-size chunks merged in order,
/// so the result does not depend on the worker count.
pub fn batch_gradient(
    params: &LstmParams,
    set: &WindowSet,
    picks: &[usize],
    mode: OutputGateMode,
) -> Result<(f64, Gradients)> {
    if picks.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let per_chunk: Vec<(f64, Gradients)> = picks
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut grads = Gradients::zeros(params.n_h, params.nu);
            for &k in chunk {
                let win = set.window(k);
                let inputs = &win[..win.len() - 1];
                let targets = &win[1..];
                let caches = forward_cached(params, inputs, mode)?;
                let mut window_loss = 0.0;
                for (cache, &y) in caches.iter().zip(targets) {
                    window_loss += linalg::log_sum_exp(cache.logits.as_slice()) - cache.logits[y];
                }
                loss_sum += window_loss / targets.len() as f64;
                grads.add_assign(&backward_bptt(params, &caches, targets, mode)?);
            }
            Ok((loss_sum, grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0;
    let mut grads = Gradients::zeros(params.n_h, params.nu);
    for (l, g) in &per_chunk {
        loss += l;
        grads.add_assign(g);
    }
    let inv = 1.0 / picks.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Mean cross-entropy (nats per character) over every window of `set`,
/// with per-window state reset.
pub fn evaluate(params: &LstmParams, set: &WindowSet, mode: OutputGateMode) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Shape("no windows to evaluate".into()));
    }
    if set.vocab_size() != params.nu {
        return Err(Error::DimensionMismatch(format!(
            "windows encoded with nu={}, model has nu={}",
            set.vocab_size(),
            params.nu
        )));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let per_chunk: Vec<(f64, usize)> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut nats = 0.0;
            let mut count = 0usize;
            let mut scratch = EvalScratch::new(params.n_h, params.nu);
            for &k in chunk {
                let win = set.window(k);
                nats += sequence_nats(params, &win[..win.len() - 1], &win[1..], mode, &mut scratch)?;
                count += win.len() - 1;
            }
            Ok((nats, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut nats, mut count) = (0.0, 0usize);
    for (n, c) in per_chunk {
        nats += n;
        count += c;
    }
    Ok(nats / count as f64)
}

/// Reusable buffers for the cache-free evaluation path.
struct EvalScratch {
    cache: StepCache,
    h: Vec<f64>,
    c: Vec<f64>,
}

impl EvalScratch {
    fn new(n_h: usize, nu: usize) -> Self {
        EvalScratch { cache: empty_cache(n_h, nu), h: vec![0.0; n_h], c: vec![0.0; n_h] }
    }
}

/// Advance the streaming state by one symbol.
fn advance(params: &LstmParams, x: usize, mode: OutputGateMode, scratch: &mut EvalScratch) {
    let EvalScratch { cache, h, c } = scratch;
    step_into(params, x, h, c, mode, cache);
    for j in 0..params.n_h {
        h[j] = cache.o[j] * cache.tanh_c[j];
    }
    c.copy_from_slice(cache.c.as_slice());
}

/// Total nats of `targets` given `inputs`, starting from the zero state.
fn sequence_nats(
    params: &LstmParams,
    inputs: &[usize],
    targets: &[usize],
    mode: OutputGateMode,
    scratch: &mut EvalScratch,
) -> Result<f64> {
    check_inputs(params, inputs)?;
    debug_assert_eq!(inputs.len(), targets.len());
    scratch.h.iter_mut().for_each(|x| *x = 0.0);
    scratch.c.iter_mut().for_each(|x| *x = 0.0);
    let mut nats = 0.0;
    for (&x, &y) in inputs.iter().zip(targets) {
        advance(params, x, mode, scratch);
        let logits = scratch.cache.logits.as_slice();
        nats += linalg::log_sum_exp(logits) - logits[y];
    }
    Ok(nats)
}

/// Minibatch training over the split. The hidden state starts at zero for
/// every window; epoch 0 of the returned trace is the untrained model.
pub fn train(cfg: &TrainConfig, split: &CorpusSplit) -> Result<(LstmParams, Vec<EpochStats>)> {
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Training("empty corpus split".into()));
    }
    if split.train.width() != cfg.w {
        return Err(Error::Config(format!(
            "split windows have width {}, config says w={}",
            split.train.width(),
            cfg.w
        )));
    }
    if cfg.lr <= 0.0 || cfg.clip <= 0.0 || cfg.epochs == 0 || cfg.m == 0 {
        return Err(Error::Config("learning rate, clip, epochs and m must be positive".into()));
    }
    let nu = split.train.vocab_size();
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(seed_tags::LSTM_INIT);
    let mut params = LstmParams::init(cfg.n_h, nu, &mut init_rng);
    let mut sampler = EpochSampler::new(split.train.len(), root.derive(seed_tags::CORPUS_SAMPLER))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip, &params);
    let m = cfg.m.min(split.train.len());

    let mut stats = Vec::with_capacity(cfg.epochs + 1);
    stats.push(EpochStats {
        epoch: 0,
        train_j: None,
        val_j: evaluate(&params, &split.validation, cfg.mode)?,
    });

    for epoch in 1..=cfg.epochs {
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for _ in 0..sampler.batches_per_epoch(m) {
            let picks = sampler.next_indices(m)?;
            let (loss, grads) = batch_gradient(&params, &split.train, &picks, cfg.mode)?;
            opt.clip_and_apply(&mut params, &grads)?;
            weighted += loss * picks.len() as f64;
            seen += picks.len();
        }
        stats.push(EpochStats {
            epoch,
            train_j: Some(weighted / seen as f64),
            val_j: evaluate(&params, &split.validation, cfg.mode)?,
        });
    }
    Ok((params, stats))
}

/// Autoregressive sampling. Temperature 0 decodes greedily (argmax, lowest
/// index on ties); otherwise the next character is drawn from
/// `softmax(logits / temperature)`. Returns only the generated characters.
pub fn generate(
    params: &LstmParams,
    vocab: &crate::corpus::Vocabulary,
    prompt: &str,
    length: usize,
    temperature: f64,
    mode: OutputGateMode,
    rng: &mut Rng,
) -> Result<String> {
    if vocab.size() != params.nu {
        return Err(Error::DimensionMismatch(format!(
            "vocabulary has {} symbols, model has nu={}",
            vocab.size(),
            params.nu
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Config("prompt must contain at least one character".into()));
    }
    if length == 0 {
        return Err(Error::Config("generation length must be >= 1".into()));
    }
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::Config("temperature must be finite and >= 0".into()));
    }
    let prompt_ids = vocab
        .encode(prompt)
        .map_err(|e| Error::Corpus(format!("prompt: {e}")))?;

    let mut scratch = EvalScratch::new(params.n_h, params.nu);
    let mut probs = vec![0.0; params.nu];
    let mut out = String::with_capacity(length);

    for &x in &prompt_ids {
        advance(params, x, mode, &mut scratch);
    }
    for _ in 0..length {
        let logits = scratch.cache.logits.as_slice();
        let next = if temperature == 0.0 {
            let mut best = f64::NEG_INFINITY;
            let mut idx = 0;
            for (k, &v) in logits.iter().enumerate() {
                if v > best {
                    best = v;
                    idx = k;
                }
            }
            idx
        } else {
            let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
            linalg::softmax_into(&scaled, &mut probs);
            rng.categorical(&probs)
        };
        out.push(vocab.char_at(next));
        advance(params, next, mode, &mut scratch);
    }
    Ok(out)
}
