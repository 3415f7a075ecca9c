//! Hidden-state trajectory extraction and comparison.
//!
//! Both models expose a T x n_h trajectory on the same text: the HMM
//! contributes either its smoothed state posteriors (gamma) or a one-hot
//! Viterbi path, the LSTM contributes softmax(c_t), which maps its signed
//! cell state into the simplex so the rows are commensurable with gamma.
//!
//! HMM state labels are arbitrary under relabeling, so before averaging
//! per-timestep cosines the LSTM columns are matched to HMM states by an
//! exact optimal assignment. The assignment objective is built from the
//! row-normalized trajectories, which makes the mean per-timestep cosine
//! itself linear in the permutation; the returned permutation therefore
//! maximizes exactly the quantity being reported, and the aligned score can
//! never fall below the identity pairing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Vocabulary, WindowSet};
use crate::error::{Error, Result};
use crate::hmm::{self, HmmParams};
use crate::linalg::{seed_tags, Matrix, Rng, Vector};
use crate::lstm::{self, EpochStats, LstmParams, OptimizerKind, OutputGateMode, TrainConfig};

/// The hidden-state counts swept by default.
pub const DEFAULT_NH_LIST: [usize; 6] = [5, 10, 15, 25, 35, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectorySource {
    HmmPosterior,
    HmmViterbi,
    LstmCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryNorm {
    Probability,
    Softmax,
}

/// T x n_h matrix of per-timestep hidden-state vectors.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub values: Matrix,
    pub source: TrajectorySource,
    pub normalization: TrajectoryNorm,
}

impl StateTrajectory {
    pub fn timesteps(&self) -> usize {
        self.values.rows()
    }

    pub fn n_states(&self) -> usize {
        self.values.cols()
    }
}

/// Which HMM state summary feeds the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HmmTrajectoryMode {
    /// Rows are the smoothed posteriors gamma_t.
    Posterior,
    /// Rows are one-hot indicators of the Viterbi path.
    Viterbi,
}

impl HmmTrajectoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HmmTrajectoryMode::Posterior => "posterior",
            HmmTrajectoryMode::Viterbi => "viterbi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(HmmTrajectoryMode::Posterior),
            "viterbi" => Ok(HmmTrajectoryMode::Viterbi),
            other => Err(Error::Config(format!(
                "unknown hmm trajectory mode {other:?} (expected \"posterior\" or \"viterbi\")"
            ))),
        }
    }
}

/// HMM hidden-state trajectory on `obs`.
pub fn hmm_trajectory(
    params: &HmmParams,
    obs: &[usize],
    mode: HmmTrajectoryMode,
) -> Result<StateTrajectory> {
    match mode {
        HmmTrajectoryMode::Posterior => {
            let fwd = hmm::forward(params, obs)?;
            let bwd = hmm::backward(params, obs, &fwd.scales)?;
            let post = hmm::posteriors(&fwd, &bwd, params, obs)?;
            Ok(StateTrajectory {
                values: post.gamma,
                source: TrajectorySource::HmmPosterior,
                normalization: TrajectoryNorm::Probability,
            })
        }
        HmmTrajectoryMode::Viterbi => {
            let (path, _) = hmm::viterbi(params, obs)?;
            let mut values = Matrix::zeros(path.len(), params.n_states());
            for (t, &s) in path.iter().enumerate() {
                values[(t, s)] = 1.0;
            }
            Ok(StateTrajectory {
                values,
                source: TrajectorySource::HmmViterbi,
                normalization: TrajectoryNorm::Probability,
            })
        }
    }
}

/// LSTM trajectory on `obs`: row t is softmax of the cell state c_t.
pub fn lstm_trajectory(
    params: &LstmParams,
    obs: &[usize],
    gate_mode: OutputGateMode,
) -> Result<StateTrajectory> {
    let (_, caches, _) = lstm::forward_sequence(params, obs, gate_mode)?;
    let mut values = Matrix::zeros(caches.len(), params.n_h);
    for (t, cache) in caches.iter().enumerate() {
        crate::linalg::softmax_into(cache.c.as_slice(), values.row_mut(t));
    }
    Ok(StateTrajectory {
        values,
        source: TrajectorySource::LstmCell,
        normalization: TrajectoryNorm::Softmax,
    })
}

/// Cosine similarity `u.v / (|u||v|)`. Undefined for a zero vector.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Comparison("cosine is undefined for a zero vector".into()));
    }
    Ok(u.dot(v) / (nu * nv))
}

/// A column matching from HMM states to LSTM units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `permutation[i]` is the LSTM column paired with HMM state `i`.
    pub permutation: Vec<usize>,
    /// Mean per-timestep cosine achieved under the permutation.
    pub score: f64,
}

fn check_same_shape(a: &StateTrajectory, b: &StateTrajectory) -> Result<(usize, usize)> {
    if a.n_states() != b.n_states() {
        return Err(Error::DimensionMismatch(format!(
            "trajectories have {} and {} states",
            a.n_states(),
            b.n_states()
        )));
    }
    if a.timesteps() != b.timesteps() {
        return Err(Error::DimensionMismatch(format!(
            "trajectories have {} and {} timesteps",
            a.timesteps(),
            b.timesteps()
        )));
    }
    if a.timesteps() == 0 {
        return Err(Error::Comparison("empty trajectories".into()));
    }
    Ok((a.timesteps(), a.n_states()))
}

/// Cross-moment matrix of the row-normalized trajectories:
/// `M[i][j] = mean_t  (u_t(i)/|u_t|) * (v_t(j)/|v_t|)` over rows where both
/// norms are positive. The mean per-timestep cosine under a permutation
/// `sigma` equals `sum_i M[i][sigma(i)]`, so an optimal assignment on `M`
/// maximizes exactly that mean.
fn cross_moment(psi_h: &StateTrajectory, psi_l: &StateTrajectory) -> Result<(Matrix, usize)> {
    let (t_len, n) = check_same_shape(psi_h, psi_l)?;
    let mut m = Matrix::zeros(n, n);
    let mut used = 0usize;
    let mut u_hat = vec![0.0; n];
    let mut v_hat = vec![0.0; n];
    for t in 0..t_len {
        let u = psi_h.values.row(t);
        let v = psi_l.values.row(t);
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        used += 1;
        for i in 0..n {
            u_hat[i] = u[i] / nu;
            v_hat[i] = v[i] / nv;
        }
        for i in 0..n {
            let w = u_hat[i];
            if w != 0.0 {
                crate::linalg::axpy(w, &v_hat, m.row_mut(i));
            }
        }
    }
    if used == 0 {
        return Err(Error::Comparison("every timestep has a zero-norm row".into()));
    }
    for x in m.data_mut() {
        *x /= used as f64;
    }
    Ok((m, used))
}

/// Exact minimum-cost assignment (Hungarian with potentials, O(n^3)).
/// Returns `perm[row] = column`.
fn min_cost_assignment(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    let inf = f64::INFINITY;
    // 1-based arrays; p[j] is the row matched to column j, 0 = unmatched.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

/// Find the LSTM-unit permutation that maximizes the mean per-timestep
/// cosine between the trajectories.
pub fn align(psi_h: &StateTrajectory, psi_l: &StateTrajectory) -> Result<Alignment> {
    let (m, _) = cross_moment(psi_h, psi_l)?;
    let n = m.rows();
    let neg = Matrix::from_fn(n, n, |i, j| -m[(i, j)]);
    let permutation = min_cost_assignment(&neg);
    let score = (0..n).map(|i| m[(i, permutation[i])]).sum();
    Ok(Alignment { permutation, score })
}

/// Outcome of a trajectory comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    /// Mean per-timestep cosine similarity.
    pub delta: f64,
    /// Timesteps excluded because one side had a zero-norm row.
    pub skipped_rows: usize,
    /// Timesteps that entered the mean.
    pub timesteps: usize,
}

/// Mean per-timestep cosine under an explicit permutation of the second
/// trajectory's columns (identity when `perm` is `None`).
pub fn compare_permuted(
    psi_h: &StateTrajectory,
    psi_l: &StateTrajectory,
    perm: Option<&[usize]>,
) -> Result<DeltaResult> {
    let (t_len, n) = check_same_shape(psi_h, psi_l)?;
    if let Some(p) = perm {
        if p.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "permutation has length {}, trajectories have {n} states",
                p.len()
            )));
        }
    }
    let mut sum = 0.0;
    let mut skipped = 0usize;
    for t in 0..t_len {
        let u = psi_h.values.row(t);
        let v = psi_l.values.row(t);
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            skipped += 1;
            continue;
        }
        let dot = match perm {
            Some(p) => (0..n).map(|i| u[i] * v[p[i]]).sum::<f64>(),
            None => crate::linalg::dot(u, v),
        };
        sum += dot / (nu * nv);
    }
    let used = t_len - skipped;
    if used == 0 {
        return Err(Error::Comparison("every timestep has a zero-norm row".into()));
    }
    Ok(DeltaResult { delta: sum / used as f64, skipped_rows: skipped, timesteps: used })
}

/// Mean per-timestep cosine similarity; alignment on by default.
pub fn compare(
    psi_h: &StateTrajectory,
    psi_l: &StateTrajectory,
    use_alignment: bool,
) -> Result<DeltaResult> {
    if use_alignment {
        let alignment = align(psi_h, psi_l)?;
        compare_permuted(psi_h, psi_l, Some(&alignment.permutation))
    } else {
        compare_permuted(psi_h, psi_l, None)
    }
}

/// Sensitivity variant: one cosine of the time-averaged state vectors.
pub fn compare_time_averaged(
    psi_h: &StateTrajectory,
    psi_l: &StateTrajectory,
    perm: Option<&[usize]>,
) -> Result<f64> {
    let (t_len, n) = check_same_shape(psi_h, psi_l)?;
    let mut mean_h = Vector::zeros(n);
    let mut mean_l = Vector::zeros(n);
    for t in 0..t_len {
        let u = psi_h.values.row(t);
        let v = psi_l.values.row(t);
        for i in 0..n {
            mean_h[i] += u[i] / t_len as f64;
            let j = perm.map_or(i, |p| p[i]);
            mean_l[i] += v[j] / t_len as f64;
        }
    }
    cosine(&mean_h, &mean_l)
}

/// Per-cell seed derivation: mixes the master seed with the corpus id and
/// the hidden-state count, so any cell can be reproduced in isolation.
pub fn cell_seed(master: u64, corpus_id: &str, n_h: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a
    for b in corpus_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng::new(master)
        .derive(seed_tags::SWEEP_CELL)
        .derive(h ^ n_h as u64)
        .seed()
}

/// Sweep configuration; one cell per (corpus, n_h) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_h_list: Vec<usize>,
    pub w: usize,
    pub stride: usize,
    pub m: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
    pub lstm_mode: OutputGateMode,
    pub hmm_mode: HmmTrajectoryMode,
    pub bw_max_iters: usize,
    pub bw_tol: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Optional cap on corpus length (characters) before splitting.
    pub max_chars: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_h_list: DEFAULT_NH_LIST.to_vec(),
            w: corpus::DEFAULT_WINDOW_WIDTH,
            stride: 1,
            m: corpus::DEFAULT_BATCH_SIZE,
            epochs: 5,
            lr: 1e-3,
            clip: 5.0,
            optimizer: OptimizerKind::Adam,
            lstm_mode: OutputGateMode::Standard,
            hmm_mode: HmmTrajectoryMode::Posterior,
            bw_max_iters: hmm::DEFAULT_MAX_ITERS,
            bw_tol: hmm::DEFAULT_TOL,
            val_fraction: corpus::DEFAULT_VAL_FRACTION,
            seed: 0,
            max_chars: None,
        }
    }
}

/// One completed sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_h: usize,
    pub corpus: String,
    pub delta_aligned: f64,
    pub delta_identity: f64,
    pub delta_time_averaged: f64,
    pub j_theta: f64,
    pub hmm_mode: String,
    pub lstm_mode: String,
    /// Derived per-cell seed (the master seed lives in the report config).
    pub seed: u64,
    pub timesteps: usize,
    pub skipped_rows: usize,
    pub hmm_logliks: Vec<f64>,
    pub hmm_converged: bool,
    pub lstm_trace: Vec<EpochStats>,
}

/// Cell slot in a report: either a completed cell or an error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub n_h: usize,
    pub corpus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<SweepCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub cells: Vec<CellRecord>,
}

impl SweepReport {
    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.cell.is_some()).count()
    }

    /// Pinned CSV layout:
    /// `n_h,corpus,delta_aligned,delta_identity,j_theta,hmm_mode,lstm_mode,seed`
    /// one row per completed cell, in sweep order.
    pub fn csv(&self) -> String {
        let mut out =
            String::from("n_h,corpus,delta_aligned,delta_identity,j_theta,hmm_mode,lstm_mode,seed\n");
        for rec in &self.cells {
            if let Some(cell) = &rec.cell {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    cell.n_h,
                    cell.corpus,
                    cell.delta_aligned,
                    cell.delta_identity,
                    cell.j_theta,
                    cell.hmm_mode,
                    cell.lstm_mode,
                    cell.seed
                ));
            }
        }
        out
    }
}

/// Train both models on one (corpus, n_h) cell and compare their validation
/// trajectories.
pub fn run_cell(corpus_id: &str, text: &str, n_h: usize, cfg: &SweepConfig) -> Result<SweepCell> {
    if n_h == 0 {
        return Err(Error::Config("n_h must be >= 1".into()));
    }
    let cap: String;
    let text = match cfg.max_chars {
        Some(n) if text.chars().count() > n => {
            cap = text.chars().take(n).collect();
            &cap
        }
        _ => text,
    };
    let vocab = Vocabulary::build(text)?;
    let split = corpus::split_corpus(text, &vocab, cfg.w, cfg.stride, cfg.val_fraction, corpus_id)?;
    let seed = cell_seed(cfg.seed, corpus_id, n_h);
    let root = Rng::new(seed);

    // HMM: Baum-Welch on the training windows (one window, one sequence).
    let hmm_init = HmmParams::init_random(n_h, vocab.size(), &mut root.derive(seed_tags::HMM_INIT));
    let train_seqs = split.train.as_slices();
    let (hmm_params, hmm_trace) = hmm::fit(&hmm_init, &train_seqs, cfg.bw_max_iters, cfg.bw_tol)?;

    // LSTM on the identical split.
    let train_cfg = TrainConfig {
        n_h,
        lr: cfg.lr,
        optimizer: cfg.optimizer,
        clip: cfg.clip,
        epochs: cfg.epochs,
        w: cfg.w,
        m: cfg.m,
        seed,
        mode: cfg.lstm_mode,
    };
    let (lstm_params, lstm_trace) = lstm::train(&train_cfg, &split)?;
    let j_theta = lstm::evaluate(&lstm_params, &split.validation, cfg.lstm_mode)?;

    // Comparison pass: non-overlapping windows over the validation region,
    // each timestep weighted once.
    let (_, val_text) = corpus::split_text(text, cfg.val_fraction)?;
    let comp = corpus::encode_windows(val_text, &vocab, cfg.w, cfg.w, corpus_id)?;
    let (psi_h, psi_l) = trajectories_over(
        &hmm_params,
        &lstm_params,
        &comp,
        cfg.hmm_mode,
        cfg.lstm_mode,
    )?;

    let alignment = align(&psi_h, &psi_l)?;
    let aligned = compare_permuted(&psi_h, &psi_l, Some(&alignment.permutation))?;
    let identity = compare_permuted(&psi_h, &psi_l, None)?;
    let time_averaged = compare_time_averaged(&psi_h, &psi_l, Some(&alignment.permutation))?;

    Ok(SweepCell {
        n_h,
        corpus: corpus_id.to_string(),
        delta_aligned: aligned.delta,
        delta_identity: identity.delta,
        delta_time_averaged: time_averaged,
        j_theta,
        hmm_mode: cfg.hmm_mode.as_str().to_string(),
        lstm_mode: cfg.lstm_mode.as_str().to_string(),
        seed,
        timesteps: aligned.timesteps,
        skipped_rows: aligned.skipped_rows,
        hmm_logliks: hmm_trace.logliks,
        hmm_converged: hmm_trace.converged,
        lstm_trace,
    })
}

/// Concatenated per-window trajectories for both models over `set`.
pub fn trajectories_over(
    hmm_params: &HmmParams,
    lstm_params: &LstmParams,
    set: &WindowSet,
    hmm_mode: HmmTrajectoryMode,
    lstm_mode: OutputGateMode,
) -> Result<(StateTrajectory, StateTrajectory)> {
    if set.is_empty() {
        return Err(Error::Comparison("no comparison windows".into()));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let per_window: Vec<(Matrix, Matrix)> = indices
        .par_iter()
        .map(|&k| {
            let obs = set.window(k);
            let h = hmm_trajectory(hmm_params, obs, hmm_mode)?;
            let l = lstm_trajectory(lstm_params, obs, lstm_mode)?;
            Ok((h.values, l.values))
        })
        .collect::<Result<Vec<_>>>()?;

    let n_h = hmm_params.n_states();
    let total: usize = per_window.iter().map(|(h, _)| h.rows()).sum();
    let mut psi_h = Matrix::zeros(total, n_h);
    let mut psi_l = Matrix::zeros(total, n_h);
    let mut row = 0;
    for (h, l) in &per_window {
        for t in 0..h.rows() {
            psi_h.row_mut(row).copy_from_slice(h.row(t));
            psi_l.row_mut(row).copy_from_slice(l.row(t));
            row += 1;
        }
    }
    Ok((
        StateTrajectory {
            values: psi_h,
            source: match hmm_mode {
                HmmTrajectoryMode::Posterior => TrajectorySource::HmmPosterior,
                HmmTrajectoryMode::Viterbi => TrajectorySource::HmmViterbi,
            },
            normalization: TrajectoryNorm::Probability,
        },
        StateTrajectory {
            values: psi_l,
            source: TrajectorySource::LstmCell,
            normalization: TrajectoryNorm::Softmax,
        },
    ))
}

/// Run every (corpus, n_h) cell; failures are recorded per cell and the
/// sweep continues.
pub fn sweep(corpora: &[(String, String)], cfg: &SweepConfig) -> SweepReport {
    let mut cells = Vec::with_capacity(corpora.len() * cfg.n_h_list.len());
    for (corpus_id, text) in corpora {
        for &n_h in &cfg.n_h_list {
            let rec = match run_cell(corpus_id, text, n_h, cfg) {
                Ok(cell) => CellRecord { n_h, corpus: corpus_id.clone(), cell: Some(cell), error: None },
                Err(e) => CellRecord { n_h, corpus: corpus_id.clone(), cell: None, error: Some(e.to_string()) },
            };
            cells.push(rec);
        }
    }
    SweepReport { config: cfg.clone(), cells }
}
