#![allow(clippy::needless_range_loop)]

//! Shared test fixtures: brute-force HMM oracles (path enumeration),
//! finite-difference gradients, an unscaled forward pass, deterministic
//! synthetic corpora, and discovery of an optional real corpus file.
//!
//! Everything here is independent of the library's inference paths: the
//! oracles enumerate paths or difference the loss directly, so agreement
//! with the fast implementations is evidence, not tautology.

#![allow(dead_code)]

use std::path::PathBuf;

use charlab::hmm::{HmmParams, SMOOTHING_EPS};
use charlab::linalg::{Matrix, Rng, Vector};
use charlab::lstm::{self, Gradients, LstmParams, OutputGateMode};

// ---------------------------------------------------------------------------
// path enumeration oracles
// ---------------------------------------------------------------------------

fn for_each_path(n_states: usize, t_len: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; t_len];
    loop {
        f(&path);
        // odometer increment
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < n_states {
                break;
            }
            path[pos] = 0;
        }
    }
}

fn path_prob(params: &HmmParams, obs: &[usize], path: &[usize]) -> f64 {
    let mut p = params.pi()[path[0]] * params.b()[(path[0], obs[0])];
    for t in 1..obs.len() {
        p *= params.a()[(path[t - 1], path[t])] * params.b()[(path[t], obs[t])];
    }
    p
}

/// Total sequence probability by summing over every state path.
pub fn enum_prob(params: &HmmParams, obs: &[usize]) -> f64 {
    let mut sum = 0.0;
    for_each_path(params.n_states(), obs.len(), |path| {
        sum += path_prob(params, obs, path);
    });
    sum
}

/// Most likely path by enumeration, with the decoder's tie semantics:
/// scores within the relative tie slack count as equal, and among tied
/// paths the one whose reversed sequence is lexicographically smallest
/// wins. That is exactly the path the per-argmax lowest-index rule selects
/// (the backtrack fixes the last state first, preferring low indices).
pub fn enum_viterbi(params: &HmmParams, obs: &[usize]) -> (Vec<usize>, f64) {
    let ln = |x: f64| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
    let tied = |a: f64, b: f64| {
        a != f64::NEG_INFINITY && (a - b).abs() <= charlab::hmm::VITERBI_TIE_RTOL * b.abs().max(1.0)
    };
    let mut best_lp = f64::NEG_INFINITY;
    let mut best_path: Vec<usize> = Vec::new();
    for_each_path(params.n_states(), obs.len(), |path| {
        let mut lp = ln(params.pi()[path[0]]) + ln(params.b()[(path[0], obs[0])]);
        for t in 1..obs.len() {
            lp += ln(params.a()[(path[t - 1], path[t])]);
            lp += ln(params.b()[(path[t], obs[t])]);
        }
        let better = if best_path.is_empty() {
            true
        } else if tied(lp, best_lp) {
            // reversed-lexicographic comparison decides the tie
            let mut pick = false;
            for (a, b) in path.iter().rev().zip(best_path.iter().rev()) {
                if a != b {
                    pick = a < b;
                    break;
                }
            }
            pick
        } else {
            lp > best_lp
        };
        if better {
            best_lp = lp.max(best_lp);
            best_path = path.to_vec();
        }
    });
    (best_path, best_lp)
}

/// State posteriors gamma[t][i] by enumeration.
pub fn enum_gamma(params: &HmmParams, obs: &[usize]) -> Vec<Vec<f64>> {
    let n = params.n_states();
    let t_len = obs.len();
    let total = enum_prob(params, obs);
    let mut gamma = vec![vec![0.0; n]; t_len];
    for_each_path(n, t_len, |path| {
        let p = path_prob(params, obs, path);
        for (t, &s) in path.iter().enumerate() {
            gamma[t][s] += p;
        }
    });
    for row in &mut gamma {
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    gamma
}

/// Transition posteriors xi[t][i][j] by enumeration.
pub fn enum_xi(params: &HmmParams, obs: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let n = params.n_states();
    let t_len = obs.len();
    let total = enum_prob(params, obs);
    let mut xi = vec![vec![vec![0.0; n]; n]; t_len - 1];
    for_each_path(n, t_len, |path| {
        let p = path_prob(params, obs, path);
        for t in 0..t_len - 1 {
            xi[t][path[t]][path[t + 1]] += p;
        }
    });
    for slice in &mut xi {
        for row in slice.iter_mut() {
            for x in row.iter_mut() {
                *x /= total;
            }
        }
    }
    xi
}

/// Smoothing used by the estimator: add eps to a probability row, then
/// renormalize.
fn smooth(row: &[f64]) -> Vec<f64> {
    let len = row.len() as f64;
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        let denom: f64 = sum + len * SMOOTHING_EPS;
        row.iter().map(|&x| (x + SMOOTHING_EPS) / denom).collect()
    } else {
        row.iter().map(|_| 1.0 / len).collect()
    }
}

/// One multi-sequence re-estimation computed from enumerated posteriors:
/// pi from the mean of gamma_0, A from summed xi over summed gamma, B from
/// indicator-weighted gamma, each row smoothed and renormalized.
pub fn enum_bw_step(params: &HmmParams, seqs: &[&[usize]]) -> (HmmParams, f64) {
    let n = params.n_states();
    let nu = params.vocab_size();
    let mut pi_acc = vec![0.0; n];
    let mut a_num = vec![vec![0.0; n]; n];
    let mut a_den = vec![0.0; n];
    let mut b_num = vec![vec![0.0; nu]; n];
    let mut b_den = vec![0.0; n];
    let mut loglik = 0.0;

    for obs in seqs {
        let gamma = enum_gamma(params, obs);
        let xi = enum_xi(params, obs);
        loglik += enum_prob(params, obs).ln();
        for i in 0..n {
            pi_acc[i] += gamma[0][i];
        }
        for slice in &xi {
            for i in 0..n {
                for j in 0..n {
                    a_num[i][j] += slice[i][j];
                }
            }
        }
        for t in 0..obs.len() - 1 {
            for i in 0..n {
                a_den[i] += gamma[t][i];
            }
        }
        for (t, &o) in obs.iter().enumerate() {
            for i in 0..n {
                b_num[i][o] += gamma[t][i];
                b_den[i] += gamma[t][i];
            }
        }
    }

    let pi_mean: Vec<f64> = pi_acc.iter().map(|x| x / seqs.len() as f64).collect();
    let pi = smooth(&pi_mean);
    let mut a_rows = Vec::with_capacity(n);
    let mut b_rows = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = if a_den[i] > 0.0 {
            a_num[i].iter().map(|&x| x / a_den[i]).collect()
        } else {
            vec![0.0; n]
        };
        a_rows.push(smooth(&row));
        let row: Vec<f64> = if b_den[i] > 0.0 {
            b_num[i].iter().map(|&x| x / b_den[i]).collect()
        } else {
            vec![0.0; nu]
        };
        b_rows.push(smooth(&row));
    }
    let updated = HmmParams::new(
        Vector::new(pi),
        Matrix::from_rows(a_rows).unwrap(),
        Matrix::from_rows(b_rows).unwrap(),
    )
    .expect("oracle update is stochastic");
    (updated, loglik)
}

/// Naive unscaled forward recursion in probability space; valid for short
/// sequences only.
pub fn unscaled_forward_loglik(params: &HmmParams, obs: &[usize]) -> f64 {
    let n = params.n_states();
    let mut alpha: Vec<f64> = (0..n)
        .map(|j| params.pi()[j] * params.b()[(j, obs[0])])
        .collect();
    for &o in &obs[1..] {
        let mut next = vec![0.0; n];
        for (j, nx) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += alpha[i] * params.a()[(i, j)];
            }
            *nx = acc * params.b()[(j, o)];
        }
        alpha = next;
    }
    alpha.iter().sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// random instances
// ---------------------------------------------------------------------------

pub fn random_instance(
    rng: &mut Rng,
    max_states: usize,
    max_symbols: usize,
    max_len: usize,
) -> (HmmParams, Vec<usize>) {
    let n = 1 + rng.below(max_states);
    let nu = 1 + rng.below(max_symbols);
    let t_len = 1 + rng.below(max_len);
    let params = HmmParams::init_random(n, nu, rng);
    let obs: Vec<usize> = (0..t_len).map(|_| rng.below(nu)).collect();
    (params, obs)
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of the mean cross-entropy; touches only the
/// forward pass and the loss.
pub fn numeric_grad(
    params: &LstmParams,
    inputs: &[usize],
    targets: &[usize],
    mode: OutputGateMode,
    step: f64,
) -> Gradients {
    let mut work = params.clone();
    let mut grads = Gradients::zeros(params.n_h, params.nu);
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for k in 0..len {
            let orig = work.tensors()[ti].1[k];
            work.tensors_mut()[ti].1[k] = orig + step;
            let plus = loss_of(&work, inputs, targets, mode);
            work.tensors_mut()[ti].1[k] = orig - step;
            let minus = loss_of(&work, inputs, targets, mode);
            work.tensors_mut()[ti].1[k] = orig;
            grads.tensors_mut()[ti].1[k] = (plus - minus) / (2.0 * step);
        }
    }
    grads
}

pub fn loss_of(params: &LstmParams, inputs: &[usize], targets: &[usize], mode: OutputGateMode) -> f64 {
    let (logits, _, _) = lstm::forward_sequence(params, inputs, mode).unwrap();
    lstm::cross_entropy(&logits, targets).unwrap()
}

/// Relative error with a floor that tolerates roundoff on zero-gradient
/// coordinates.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-5)
}

// ---------------------------------------------------------------------------
// corpora
// ---------------------------------------------------------------------------

const WORDS: [&str; 60] = [
    "the", "of", "and", "to", "a", "in", "that", "is", "was", "he", "for", "it", "with", "as",
    "his", "on", "be", "at", "by", "i", "this", "had", "not", "are", "but", "from", "or", "have",
    "an", "they", "which", "one", "you", "were", "her", "all", "she", "there", "would", "their",
    "we", "him", "been", "has", "when", "who", "will", "more", "no", "if", "out", "so", "said",
    "what", "up", "its", "about", "into", "than", "them",
];

/// Deterministic English-like filler text: sentences of common words with
/// capitalization, punctuation, occasional digits and quotes, wrapped into
/// short lines. Structured enough for a small model to learn, with a
/// realistic character vocabulary.
pub fn synthetic_corpus(n_chars: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(n_chars + 80);
    let mut line_len = 0usize;
    while out.chars().count() < n_chars {
        let n_words = 4 + rng.below(7);
        for wi in 0..n_words {
            let mut word = WORDS[rng.below(WORDS.len())].to_string();
            if wi == 0 {
                let mut cs = word.chars();
                let first = cs.next().unwrap().to_ascii_uppercase();
                word = first.to_string() + cs.as_str();
            } else if rng.below(20) == 0 {
                word = format!("'{word}'");
            } else if rng.below(25) == 0 {
                word = format!("{}", rng.below(100));
            }
            if wi > 0 {
                if line_len > 58 {
                    out.push('\n');
                    line_len = 0;
                } else {
                    out.push(' ');
                    line_len += 1;
                }
            }
            line_len += word.chars().count();
            out.push_str(&word);
        }
        let p = rng.below(10);
        out.push(if p < 7 { '.' } else if p < 8 { ',' } else if p < 9 { ';' } else { '?' });
        line_len += 1;
    }
    out.chars().take(n_chars).collect()
}

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// An optional real corpus: the CHARLAB_TS environment variable or a file
/// under data/. Used when present; tests fall back to the synthetic corpus
/// otherwise and say so.
pub fn find_real_corpus() -> Option<(PathBuf, String)> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(p) = std::env::var("CHARLAB_TS") {
        candidates.push(PathBuf::from(p));
    }
    candidates.push(workspace_root().join("data/tinyshakespeare.txt"));
    candidates.push(workspace_root().join("data/tiny_shakespeare.txt"));
    candidates.push(workspace_root().join("data/input.txt"));
    for p in candidates {
        if p.is_file() {
            if let Ok(text) = std::fs::read_to_string(&p) {
                if text.chars().count() >= 100_000 {
                    return Some((p, text));
                }
            }
        }
    }
    None
}

/// 100k-character training corpus: a real corpus slice when available,
/// otherwise the deterministic synthetic stand-in.
pub fn training_slice_100k() -> (String, String) {
    match find_real_corpus() {
        Some((path, text)) => (
            format!("real corpus slice ({})", path.display()),
            text.chars().take(100_000).collect(),
        ),
        None => ("synthetic stand-in corpus".to_string(), synthetic_corpus(100_000, 2024)),
    }
}

/// Character-frequency entropy of a text in nats: -sum p ln p.
pub fn unigram_entropy(text: &str) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<char, usize> = HashMap::new();
    let mut total = 0usize;
    for c in text.chars() {
        *counts.entry(c).or_insert(0) += 1;
        total += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
