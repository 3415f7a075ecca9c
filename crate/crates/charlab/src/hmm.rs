//! Discrete-observation hidden Markov model with scaled forward-backward
//! inference, multi-sequence Baum-Welch estimation, Viterbi decoding and
//! ancestral sampling.
//!
//! Scaling convention: the forward pass normalizes alpha at every step, so
//! `alpha_hat[t]` sums to 1 and `scales[t]` holds the Rabiner coefficient
//! `c_t = 1 / sum_j alpha_t(j)`. The sequence log-likelihood is
//! `-sum_t ln(scales[t])`. The backward pass divides by the same per-step
//! masses, which makes `alpha_hat[t][i] * beta_hat[t][i]` the state
//! posterior directly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::linalg::{Matrix, Rng, Vector};

/// Added to every re-estimated probability row before renormalization, so
/// finite data cannot drive an entry to an absorbing exact zero.
pub const SMOOTHING_EPS: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Sequences per work unit when accumulating E-step statistics. Fixed (not
/// derived from the thread count) so the reduction order, and therefore
/// every accumulated bit, is identical no matter how many workers run.
const ESTEP_CHUNK: usize = 64;

/// HMM parameter triple (pi, A, B). All rows are stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams {
    n_h: usize,
    nu: usize,
    pi: Vector,
    a: Matrix,
    b: Matrix,
}

impl HmmParams {
    /// Validates shapes, nonnegativity, finiteness and row sums (1e-10).
    pub fn new(pi: Vector, a: Matrix, b: Matrix) -> Result<Self> {
        let n_h = pi.len();
        if n_h == 0 {
            return Err(Error::Shape("HMM needs at least one state".into()));
        }
        if a.rows() != n_h || a.cols() != n_h {
            return Err(Error::Shape(format!(
                "transition matrix is {}x{}, expected {n_h}x{n_h}",
                a.rows(),
                a.cols()
            )));
        }
        if b.rows() != n_h || b.cols() == 0 {
            return Err(Error::Shape(format!(
                "emission matrix is {}x{}, expected {n_h} rows",
                b.rows(),
                b.cols()
            )));
        }
        let nu = b.cols();
        check_stochastic_row("pi", pi.as_slice())?;
        for i in 0..n_h {
            check_stochastic_row("A", a.row(i))?;
            check_stochastic_row("B", b.row(i))?;
        }
        Ok(HmmParams { n_h, nu, pi, a, b })
    }

    /// Random initialization: every row of pi, A and B is a draw from a
    /// flat Dirichlet (normalized i.i.d. unit exponentials). Uniform rows
    /// are avoided on purpose; they sit on a saddle point of EM.
    pub fn init_random(n_h: usize, nu: usize, rng: &mut Rng) -> Self {
        assert!(n_h >= 1 && nu >= 1);
        let mut draw_row = |len: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..len).map(|_| rng.exp1()).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        };
        let pi = Vector::new(draw_row(n_h));
        let mut a = Matrix::zeros(n_h, n_h);
        for i in 0..n_h {
            a.row_mut(i).copy_from_slice(&draw_row(n_h));
        }
        let mut b = Matrix::zeros(n_h, nu);
        for i in 0..n_h {
            b.row_mut(i).copy_from_slice(&draw_row(nu));
        }
        HmmParams { n_h, nu, pi, a, b }
    }

    pub fn n_states(&self) -> usize {
        self.n_h
    }

    pub fn vocab_size(&self) -> usize {
        self.nu
    }

    pub fn pi(&self) -> &Vector {
        &self.pi
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    fn check_obs(&self, obs: &[usize]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::Inference("empty observation sequence".into()));
        }
        if let Some((t, &o)) = obs.iter().enumerate().find(|(_, &o)| o >= self.nu) {
            return Err(Error::Inference(format!(
                "symbol {o} at position {t} out of range (nu={})",
                self.nu
            )));
        }
        Ok(())
    }

    /// Serialize as an `hmm-v1` JSON document. `extra` key/value pairs
    /// (already-serialized JSON) are appended verbatim; callers use this to
    /// embed the resolved run configuration.
    pub fn to_json(&self, vocab_ref: &str, extra: &[(&str, String)]) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        s.push_str("  \"format\": \"hmm-v1\",\n");
        s.push_str(&format!("  \"n_h\": {},\n", self.n_h));
        s.push_str(&format!("  \"nu\": {},\n", self.nu));
        s.push_str("  \"pi\": ");
        jsonfmt::push_f64_array(&mut s, self.pi.as_slice());
        s.push_str(",\n  \"A\": ");
        jsonfmt::push_matrix(&mut s, &self.a);
        s.push_str(",\n  \"B\": ");
        jsonfmt::push_matrix(&mut s, &self.b);
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

    /// Parse an `hmm-v1` document; returns the params and the vocabulary
    /// manifest hash they were trained against.
    pub fn from_json(json: &str) -> Result<(Self, String)> {
        let v: serde_json::Value = serde_json::from_str(json)
            .map_err(|e| Error::ModelFile(format!("invalid JSON: {e}")))?;
        let format = jsonfmt::get_str(&v, "format")?;
        if format != "hmm-v1" {
            return Err(Error::ModelFile(format!(
                "expected format \"hmm-v1\", found {format:?}"
            )));
        }
        let n_h = jsonfmt::get_usize(&v, "n_h")?;
        let nu = jsonfmt::get_usize(&v, "nu")?;
        let pi = jsonfmt::parse_vector(jsonfmt::get(&v, "pi")?, "pi", n_h)?;
        let a = jsonfmt::parse_matrix(jsonfmt::get(&v, "A")?, "A", n_h, n_h)?;
        let b = jsonfmt::parse_matrix(jsonfmt::get(&v, "B")?, "B", n_h, nu)?;
        let vocab_ref = jsonfmt::get_str(&v, "vocab_ref")?.to_string();
        Ok((HmmParams::new(pi, a, b)?, vocab_ref))
    }
}

fn check_stochastic_row(name: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Shape(format!("{name} contains a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::Shape(format!("{name} row sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Scaled forward pass output.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// T x n_h; every row sums to 1.
    pub alpha_hat: Matrix,
    /// Rabiner coefficients c_t = 1 / (per-step alpha mass).
    pub scales: Vec<f64>,
    /// ln P(O) = -sum_t ln(scales[t]), clamped at 0.
    pub loglik: f64,
}

/// Scaled backward pass output; same scaling as the paired forward pass.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub beta_hat: Matrix,
}

/// State and transition posteriors.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// T x n_h; gamma[t][i] = P(S_t = i | O).
    pub gamma: Matrix,
    /// T-1 slices of n_h x n_h; xi[t][(i,j)] = P(S_t = i, S_{t+1} = j | O).
    pub xi: Vec<Matrix>,
}

/// Forward algorithm with per-step normalization.
pub fn forward(params: &HmmParams, obs: &[usize]) -> Result<ForwardResult> {
    params.check_obs(obs)?;
    let n = params.n_h;
    let t_len = obs.len();
    let mut alpha_hat = Matrix::zeros(t_len, n);
    let mut scales = Vec::with_capacity(t_len);

    let b_col = |o: usize, out: &mut Vec<f64>| {
        out.clear();
        out.extend((0..n).map(|j| params.b[(j, o)]));
    };

    let mut emit = Vec::with_capacity(n);
    b_col(obs[0], &mut emit);
    let row0 = alpha_hat.row_mut(0);
    for j in 0..n {
        row0[j] = params.pi[j] * emit[j];
    }
    let mass: f64 = row0.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Inference(format!(
            "symbol {} at position 0 has zero probability in every state",
            obs[0]
        )));
    }
    for x in row0.iter_mut() {
        *x /= mass;
    }
    scales.push(1.0 / mass);

    let mut pred = vec![0.0; n];
    for t in 1..t_len {
        pred.iter_mut().for_each(|x| *x = 0.0);
        {
            let prev = alpha_hat.row(t - 1);
            for i in 0..n {
                let ai = params.a.row(i);
                let w = prev[i];
                for j in 0..n {
                    pred[j] += w * ai[j];
                }
            }
        }
        b_col(obs[t], &mut emit);
        let row = alpha_hat.row_mut(t);
        let mut mass = 0.0;
        for j in 0..n {
            let v = pred[j] * emit[j];
            row[j] = v;
            mass += v;
        }
        if mass <= 0.0 {
            return Err(Error::Inference(format!(
                "symbol {} at position {t} has zero probability in every state",
                obs[t]
            )));
        }
        for x in row.iter_mut() {
            *x /= mass;
        }
        scales.push(1.0 / mass);
    }

    // clamped at 0: a log-probability cannot be positive, but rounding in
    // the scale products can leave an ulp of noise when P(O) = 1 exactly
    let loglik = (-scales.iter().map(|c| c.ln()).sum::<f64>()).min(0.0);
    Ok(ForwardResult { alpha_hat, scales, loglik })
}

/// Backward algorithm reusing the forward scaling coefficients.
pub fn backward(params: &HmmParams, obs: &[usize], scales: &[f64]) -> Result<BackwardResult> {
    params.check_obs(obs)?;
    let n = params.n_h;
    let t_len = obs.len();
    if scales.len() != t_len {
        return Err(Error::Shape(format!(
            "{} scales for a length-{t_len} sequence",
            scales.len()
        )));
    }
    let mut beta_hat = Matrix::zeros(t_len, n);
    beta_hat.row_mut(t_len - 1).iter_mut().for_each(|x| *x = 1.0);

    let mut tmp = vec![0.0; n];
    for t in (0..t_len - 1).rev() {
        let o_next = obs[t + 1];
        {
            let next = beta_hat.row(t + 1);
            for j in 0..n {
                tmp[j] = params.b[(j, o_next)] * next[j];
            }
        }
        let c_next = scales[t + 1];
        let row = beta_hat.row_mut(t);
        for i in 0..n {
            row[i] = c_next * crate::linalg::dot(params.a.row(i), &tmp);
        }
    }
    Ok(BackwardResult { beta_hat })
}

/// Gamma and xi posteriors from a matched forward/backward pair.
pub fn posteriors(
    fwd: &ForwardResult,
    bwd: &BackwardResult,
    params: &HmmParams,
    obs: &[usize],
) -> Result<Posteriors> {
    params.check_obs(obs)?;
    let n = params.n_h;
    let t_len = obs.len();
    if fwd.alpha_hat.rows() != t_len || bwd.beta_hat.rows() != t_len {
        return Err(Error::Shape("forward/backward results do not match the sequence".into()));
    }

    let mut gamma = Matrix::zeros(t_len, n);
    for t in 0..t_len {
        let a_row = fwd.alpha_hat.row(t);
        let b_row = bwd.beta_hat.row(t);
        let row = gamma.row_mut(t);
        let mut sum = 0.0;
        for i in 0..n {
            let v = a_row[i] * b_row[i];
            row[i] = v;
            sum += v;
        }
        // Mathematically sum == 1; renormalize to shed rounding drift.
        for x in row.iter_mut() {
            *x /= sum;
        }
    }

    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    let mut tmp = vec![0.0; n];
    for t in 0..t_len - 1 {
        let o_next = obs[t + 1];
        let c_next = fwd.scales[t + 1];
        {
            let beta_next = bwd.beta_hat.row(t + 1);
            for j in 0..n {
                tmp[j] = params.b[(j, o_next)] * beta_next[j] * c_next;
            }
        }
        let mut slice = Matrix::zeros(n, n);
        let alpha_row = fwd.alpha_hat.row(t);
        let mut sum = 0.0;
        for i in 0..n {
            let a_row = params.a.row(i);
            let out = slice.row_mut(i);
            let w = alpha_row[i];
            for j in 0..n {
                let v = w * a_row[j] * tmp[j];
                out[j] = v;
                sum += v;
            }
        }
        for x in slice.data_mut().iter_mut() {
            *x /= sum;
        }
        xi.push(slice);
    }

    Ok(Posteriors { gamma, xi })
}

/// Accumulated E-step statistics for a set of sequences.
#[derive(Debug, Clone)]
struct EStepStats {
    pi_acc: Vec<f64>,
    a_num: Matrix,
    b_num: Matrix,
    loglik: f64,
    n_seqs: usize,
}

impl EStepStats {
    fn zeros(n_h: usize, nu: usize) -> Self {
        EStepStats {
            pi_acc: vec![0.0; n_h],
            a_num: Matrix::zeros(n_h, n_h),
            b_num: Matrix::zeros(n_h, nu),
            loglik: 0.0,
            n_seqs: 0,
        }
    }

    fn absorb_sequence(&mut self, params: &HmmParams, obs: &[usize]) -> Result<()> {
        let fwd = forward(params, obs)?;
        let bwd = backward(params, obs, &fwd.scales)?;
        let post = posteriors(&fwd, &bwd, params, obs)?;
        let t_len = obs.len();
        let n = params.n_h;

        for i in 0..n {
            self.pi_acc[i] += post.gamma[(0, i)];
        }
        for slice in &post.xi {
            for i in 0..n {
                let src = slice.row(i);
                let dst = self.a_num.row_mut(i);
                for j in 0..n {
                    dst[j] += src[j];
                }
            }
        }
        for t in 0..t_len {
            let o = obs[t];
            let g = post.gamma.row(t);
            for i in 0..n {
                self.b_num[(i, o)] += g[i];
            }
        }
        self.loglik += fwd.loglik;
        self.n_seqs += 1;
        Ok(())
    }

    fn merge(&mut self, other: &EStepStats) {
        for (a, b) in self.pi_acc.iter_mut().zip(&other.pi_acc) {
            *a += b;
        }
        for (a, b) in self.a_num.data_mut().iter_mut().zip(other.a_num.data()) {
            *a += b;
        }
        for (a, b) in self.b_num.data_mut().iter_mut().zip(other.b_num.data()) {
            *a += b;
        }
        self.loglik += other.loglik;
        self.n_seqs += other.n_seqs;
    }
}

/// One Baum-Welch update.
#[derive(Debug, Clone)]
pub struct BaumWelchStep {
    pub params: HmmParams,
    /// Total log-likelihood of the input sequences under the *pre-update*
    /// parameters (the EM monotonicity trace is built from these).
    pub loglik: f64,
    /// Rows whose accumulated posterior mass was zero and were therefore
    /// re-estimated as uniform by the smoothing step.
    pub degenerate_rows: usize,
}

/// Normalize a numerator row into a smoothed probability row:
/// `p = num / sum(num)`, then `(p + eps) / (1 + len * eps)`. A row with no
/// mass comes out uniform and is counted as degenerate.
fn smoothed_row(num: &[f64], out: &mut [f64], degenerate: &mut usize) {
    let sum: f64 = num.iter().sum();
    let len = num.len() as f64;
    if sum > 0.0 {
        let denom = 1.0 + len * SMOOTHING_EPS;
        for (o, &x) in out.iter_mut().zip(num) {
            *o = (x / sum + SMOOTHING_EPS) / denom;
        }
    } else {
        *degenerate += 1;
        for o in out.iter_mut() {
            *o = 1.0 / len;
        }
    }
}

/// One EM re-estimation over a set of sequences. Per-sequence statistics
/// are accumulated in fixed-size chunks merged in order, so the result is
/// reproducible bit-for-bit regardless of worker count.
pub fn baum_welch_step(params: &HmmParams, sequences: &[&[usize]]) -> Result<BaumWelchStep> {
    if sequences.is_empty() {
        return Err(Error::Training("no sequences to fit".into()));
    }
    let chunk_stats: Vec<EStepStats> = sequences
        .par_chunks(ESTEP_CHUNK)
        .map(|chunk| {
            let mut stats = EStepStats::zeros(params.n_h, params.nu);
            for obs in chunk {
                stats.absorb_sequence(params, obs)?;
            }
            Ok(stats)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = EStepStats::zeros(params.n_h, params.nu);
    for s in &chunk_stats {
        stats.merge(s);
    }

    let n = params.n_h;
    let mut degenerate = 0;

    let mut pi = Vector::zeros(n);
    let pi_mean: Vec<f64> = stats.pi_acc.iter().map(|x| x / stats.n_seqs as f64).collect();
    smoothed_row(&pi_mean, pi.as_mut_slice(), &mut degenerate);

    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        smoothed_row(stats.a_num.row(i), a.row_mut(i), &mut degenerate);
    }
    let mut b = Matrix::zeros(n, params.nu);
    for i in 0..n {
        smoothed_row(stats.b_num.row(i), b.row_mut(i), &mut degenerate);
    }

    Ok(BaumWelchStep {
        params: HmmParams { n_h: n, nu: params.nu, pi, a, b },
        loglik: stats.loglik,
        degenerate_rows: degenerate,
    })
}

/// Fit trace: per-iteration total log-likelihood (pre-update), whether the
/// relative-change criterion fired, and how many smoothing rescues happened.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub logliks: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate_events: usize,
}

/// Iterate Baum-Welch until `|delta loglik| < tol * |loglik|` or `max_iters`.
pub fn fit(
    init: &HmmParams,
    sequences: &[&[usize]],
    max_iters: usize,
    tol: f64,
) -> Result<(HmmParams, FitTrace)> {
    if max_iters < 1 {
        return Err(Error::Training("max_iters must be >= 1".into()));
    }
    if tol <= 0.0 {
        return Err(Error::Training("tol must be > 0".into()));
    }
    let mut params = init.clone();
    let mut trace = FitTrace {
        logliks: Vec::with_capacity(max_iters),
        iterations: 0,
        converged: false,
        degenerate_events: 0,
    };
    for _ in 0..max_iters {
        let step = baum_welch_step(&params, sequences)?;
        trace.logliks.push(step.loglik);
        if step.degenerate_rows > 0 {
            trace.degenerate_events += 1;
        }
        params = step.params;
        trace.iterations += 1;
        let k = trace.logliks.len();
        if k >= 2 {
            let (prev, cur) = (trace.logliks[k - 2], trace.logliks[k - 1]);
            if (cur - prev).abs() < tol * cur.abs() {
                trace.converged = true;
                break;
            }
        }
    }
    Ok((params, trace))
}

/// Relative slack under which two path scores count as tied. Distinct
/// state paths can share the exact same probability (same factors in a
/// different order); evaluated in floating point their log-scores then
/// differ by a few ulps, and a bitwise comparison would resolve such ties
/// arbitrarily. Scores within this slack are treated as equal so the
/// lowest-index rule applies to every mathematical tie.
pub const VITERBI_TIE_RTOL: f64 = 1e-12;

/// `cand` beats `best` only when it clears the tie slack.
pub(crate) fn viterbi_better(cand: f64, best: f64) -> bool {
    if best == f64::NEG_INFINITY {
        return cand > f64::NEG_INFINITY;
    }
    cand > best + VITERBI_TIE_RTOL * best.abs().max(1.0)
}

/// Most likely state path, in log-space. Ties at every argmax (scores
/// within `VITERBI_TIE_RTOL`) break toward the lowest state index.
pub fn viterbi(params: &HmmParams, obs: &[usize]) -> Result<(Vec<usize>, f64)> {
    params.check_obs(obs)?;
    let n = params.n_h;
    let t_len = obs.len();

    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let ln_a: Vec<f64> = params.a.data().iter().map(|&x| ln(x)).collect();

    let mut delta = vec![f64::NEG_INFINITY; n];
    let mut prev_delta = vec![0.0; n];
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(t_len);

    for j in 0..n {
        delta[j] = ln(params.pi[j]) + ln(params.b[(j, obs[0])]);
    }
    if delta.iter().all(|x| *x == f64::NEG_INFINITY) {
        return Err(Error::Inference(format!(
            "no state path can emit symbol {} at position 0",
            obs[0]
        )));
    }
    back.push(vec![0; n]);

    for t in 1..t_len {
        std::mem::swap(&mut delta, &mut prev_delta);
        let mut ptr = vec![0usize; n];
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for i in 0..n {
                let cand = prev_delta[i] + ln_a[i * n + j];
                if viterbi_better(cand, best) {
                    best = cand;
                    best_i = i;
                }
            }
            delta[j] = best + ln(params.b[(j, obs[t])]);
            ptr[j] = best_i;
        }
        back.push(ptr);
        if delta.iter().all(|x| *x == f64::NEG_INFINITY) {
            return Err(Error::Inference(format!(
                "no state path can emit symbol {} at position {t}",
                obs[t]
            )));
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0usize;
    for (j, &d) in delta.iter().enumerate() {
        if viterbi_better(d, best) {
            best = d;
            last = j;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Inference("sequence has zero probability under the model".into()));
    }

    let mut path = vec![0usize; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok((path, best))
}

/// Ancestral sampling of a symbol sequence.
pub fn sample(params: &HmmParams, length: usize, rng: &mut Rng) -> Vec<usize> {
    sample_with_states(params, length, rng).0
}

/// Ancestral sampling, also returning the hidden state path. Each
/// transition draw reads only the current state.
pub fn sample_with_states(params: &HmmParams, length: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    assert!(length >= 1);
    let mut states = Vec::with_capacity(length);
    let mut symbols = Vec::with_capacity(length);
    let mut s = rng.categorical(params.pi.as_slice());
    for _ in 0..length {
        states.push(s);
        symbols.push(rng.categorical(params.b.row(s)));
        s = rng.categorical(params.a.row(s));
    }
    (symbols, states)
}
