//! Command-line entry points: `train-hmm`, `train-lstm`, `evaluate`,
//! `compare`, `sweep`, `generate`.
//!
//! Every command accepts `--config <file>` with a JSON (possibly partial)
//! configuration; explicit flags override file values, file values override
//! defaults. The fully resolved configuration is echoed into every artifact
//! the command writes, so any artifact can be reproduced byte-for-byte by
//! re-running the command with its embedded config.
//!
//! Exit codes are stable: 0 success, 2 input/config error, 3 model/vocab
//! mismatch, 4 dimension mismatch, 5 total sweep failure, 1 internal error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Vocabulary};
use crate::error::{Error, Result};
use crate::hmm::{self, HmmParams};
use crate::linalg::{seed_tags, Rng};
use crate::lstm::{self, LstmParams, OptimizerKind, OutputGateMode, TrainConfig};
use crate::statecmp::{self, HmmTrajectoryMode, SweepConfig};

pub const EXIT_INPUT_ERROR: i32 = 2;
pub const EXIT_VOCAB_MISMATCH: i32 = 3;
pub const EXIT_DIMENSION_MISMATCH: i32 = 4;
pub const EXIT_SWEEP_FAILED: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Corpus(_) | Error::Config(_) | Error::Io(_) | Error::ModelFile(_) => EXIT_INPUT_ERROR,
        Error::VocabMismatch(_) => EXIT_VOCAB_MISMATCH,
        Error::DimensionMismatch(_) => EXIT_DIMENSION_MISMATCH,
        Error::SweepFailed(_) => EXIT_SWEEP_FAILED,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "charlab",
    version,
    about = "Character-level language modeling lab: HMM and LSTM from scratch, \
             with hidden-state trajectory comparison"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit an HMM with Baum-Welch and write hmm_model.json + fit trace
    TrainHmm(TrainHmmArgs),
    /// Train the LSTM by BPTT and write lstm_model.json + loss trace
    TrainLstm(TrainLstmArgs),
    /// Cross-entropy of a saved model on a corpus split
    Evaluate(EvaluateArgs),
    /// Cosine similarity of HMM and LSTM hidden-state trajectories
    Compare(CompareArgs),
    /// Train and compare both models across a list of hidden-state counts
    Sweep(SweepArgs),
    /// Sample text from a saved model
    Generate(GenerateArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainHmm(args) => cmd_train_hmm(&TrainHmmConfig::resolve(args)?),
        Command::TrainLstm(args) => cmd_train_lstm(&TrainLstmConfig::resolve(args)?),
        Command::Evaluate(args) => cmd_evaluate(&EvaluateConfig::resolve(args)?),
        Command::Compare(args) => cmd_compare(&CompareConfig::resolve(args)?),
        Command::Sweep(args) => cmd_sweep(&SweepCliConfig::resolve(args)?),
        Command::Generate(args) => cmd_generate(&GenerateConfig::resolve(args)?),
    }
}

pub fn run_with_exit_code(cli: Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// config plumbing
// ---------------------------------------------------------------------------

fn load_partial<T: serde::de::DeserializeOwned + Default>(path: &Option<String>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {p}: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("cannot parse config {p}: {e}")))
        }
    }
}

fn write_artifact(dir: &Path, name: &str, bytes: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    Ok(path)
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("config serializes");
    s.push('\n');
    s
}

fn compact<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config serializes")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Which region of the corpus a command reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitChoice {
    Train,
    Validation,
    All,
}

impl SplitChoice {
    fn as_str(self) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::Validation => "validation",
            SplitChoice::All => "all",
        }
    }

    fn region(self, text: &str, val_fraction: f64) -> Result<&str> {
        let (train, val) = corpus::split_text(text, val_fraction)?;
        Ok(match self {
            SplitChoice::Train => train,
            SplitChoice::Validation => val,
            SplitChoice::All => text,
        })
    }
}

fn corpus_id_from_path(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
        .replace([',', '\n', '\r'], "_")
}

fn load_vocab_for_model(model_path: &str, vocab_path: &Option<String>) -> Result<(Vocabulary, String)> {
    let path = match vocab_path {
        Some(p) => PathBuf::from(p),
        None => Path::new(model_path)
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json"),
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let vocab = Vocabulary::from_manifest_json(&text)?;
    Ok((vocab, path.display().to_string()))
}

fn check_vocab_ref(what: &str, model_ref: &str, vocab: &Vocabulary, vocab_path: &str) -> Result<()> {
    let have = vocab.manifest_hash();
    if have != model_ref {
        return Err(Error::VocabMismatch(format!(
            "{what} was trained against vocabulary {model_ref} but {vocab_path} hashes to {have}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-hmm
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHmmArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
    /// Plain-text corpus path
    #[arg(long)]
    pub corpus: Option<String>,
    /// Hidden-state count
    #[arg(long)]
    pub n_h: Option<usize>,
    /// Window width
    #[arg(long)]
    pub w: Option<usize>,
    /// Window stride
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Baum-Welch iteration cap
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative log-likelihood convergence tolerance
    #[arg(long)]
    pub tol: Option<f64>,
    /// Fraction of the corpus tail held out for validation
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Truncate the corpus to this many characters
    #[arg(long)]
    pub max_chars: Option<usize>,
    /// Output directory for all artifacts
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHmmConfig {
    pub corpus: String,
    pub n_h: usize,
    pub w: usize,
    pub stride: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub val_fraction: f64,
    pub max_chars: Option<usize>,
    pub out_dir: String,
}

impl TrainHmmConfig {
    pub fn resolve(args: TrainHmmArgs) -> Result<Self> {
        let file: TrainHmmArgs = load_partial(&args.config)?;
        Ok(TrainHmmConfig {
            corpus: args
                .corpus
                .or(file.corpus)
                .ok_or_else(|| Error::Config("--corpus is required".into()))?,
            n_h: args.n_h.or(file.n_h).unwrap_or(10),
            w: args.w.or(file.w).unwrap_or(corpus::DEFAULT_WINDOW_WIDTH),
            stride: args.stride.or(file.stride).unwrap_or(1),
            seed: args.seed.or(file.seed).unwrap_or(0),
            max_iters: args.max_iters.or(file.max_iters).unwrap_or(hmm::DEFAULT_MAX_ITERS),
            tol: args.tol.or(file.tol).unwrap_or(hmm::DEFAULT_TOL),
            val_fraction: args
                .val_fraction
                .or(file.val_fraction)
                .unwrap_or(corpus::DEFAULT_VAL_FRACTION),
            max_chars: args.max_chars.or(file.max_chars),
            out_dir: args.out_dir.or(file.out_dir).unwrap_or_else(|| "out".into()),
        })
    }
}

fn load_capped_corpus(path: &str, max_chars: Option<usize>) -> Result<String> {
    let text = corpus::load_text(Path::new(path))?;
    Ok(match max_chars {
        Some(n) if text.chars().count() > n => text.chars().take(n).collect(),
        _ => text,
    })
}

pub fn cmd_train_hmm(cfg: &TrainHmmConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    let text = load_capped_corpus(&cfg.corpus, cfg.max_chars)?;
    let vocab = Vocabulary::build(&text)?;
    let source = corpus_id_from_path(&cfg.corpus);
    let split = corpus::split_corpus(&text, &vocab, cfg.w, cfg.stride, cfg.val_fraction, &source)?;

    println!(
        "train-hmm: corpus {} ({} chars, nu={}), {} train windows, n_h={}",
        source,
        text.chars().count(),
        vocab.size(),
        split.train.len(),
        cfg.n_h
    );

    let root = Rng::new(cfg.seed);
    let init = HmmParams::init_random(cfg.n_h, vocab.size(), &mut root.derive(seed_tags::HMM_INIT));
    let seqs = split.train.as_slices();
    let (params, trace) = hmm::fit(&init, &seqs, cfg.max_iters, cfg.tol)?;

    let mut trace_csv = String::from("iteration,loglik\n");
    for (i, ll) in trace.logliks.iter().enumerate() {
        trace_csv.push_str(&format!("{},{}\n", i + 1, ll));
    }

    let fit_summary = serde_json::json!({
        "iterations": trace.iterations,
        "converged": trace.converged,
        "degenerate_events": trace.degenerate_events,
        "final_loglik": trace.logliks.last(),
    });
    let model_json = params.to_json(
        &vocab.manifest_hash(),
        &[("config", compact(cfg)), ("fit", fit_summary.to_string())],
    );

    write_artifact(&out_dir, "vocab.json", &vocab.manifest_json())?;
    let model_path = write_artifact(&out_dir, "hmm_model.json", &model_json)?;
    write_artifact(&out_dir, "hmm_fit_trace.csv", &trace_csv)?;
    write_artifact(&out_dir, "train_hmm_config.json", &pretty(cfg))?;

    println!(
        "train-hmm: {} iterations (converged={}), final loglik {}",
        trace.iterations,
        trace.converged,
        trace.logliks.last().copied().unwrap_or(f64::NAN)
    );
    println!("train-hmm: wrote {}", model_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-lstm
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainLstmArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub n_h: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global-norm gradient clip
    #[arg(long)]
    pub clip: Option<f64>,
    /// Optimizer: adam or sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Output-gate mode: standard or paper-faithful
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLstmConfig {
    pub corpus: String,
    pub n_h: usize,
    pub w: usize,
    pub stride: usize,
    pub m: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
    pub mode: OutputGateMode,
    pub seed: u64,
    pub val_fraction: f64,
    pub max_chars: Option<usize>,
    pub out_dir: String,
}

impl TrainLstmConfig {
    pub fn resolve(args: TrainLstmArgs) -> Result<Self> {
        let file: TrainLstmArgs = load_partial(&args.config)?;
        let defaults = TrainConfig::default();
        let optimizer = match args.optimizer.or(file.optimizer) {
            Some(s) => OptimizerKind::parse(&s)?,
            None => defaults.optimizer,
        };
        let mode = match args.mode.or(file.mode) {
            Some(s) => OutputGateMode::parse(&s)?,
            None => defaults.mode,
        };
        Ok(TrainLstmConfig {
            corpus: args
                .corpus
                .or(file.corpus)
                .ok_or_else(|| Error::Config("--corpus is required".into()))?,
            n_h: args.n_h.or(file.n_h).unwrap_or(defaults.n_h),
            w: args.w.or(file.w).unwrap_or(defaults.w),
            stride: args.stride.or(file.stride).unwrap_or(1),
            m: args.m.or(file.m).unwrap_or(defaults.m),
            epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
            clip: args.clip.or(file.clip).unwrap_or(defaults.clip),
            optimizer,
            mode,
            seed: args.seed.or(file.seed).unwrap_or(0),
            val_fraction: args
                .val_fraction
                .or(file.val_fraction)
                .unwrap_or(corpus::DEFAULT_VAL_FRACTION),
            max_chars: args.max_chars.or(file.max_chars),
            out_dir: args.out_dir.or(file.out_dir).unwrap_or_else(|| "out".into()),
        })
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_h: self.n_h,
            lr: self.lr,
            optimizer: self.optimizer,
            clip: self.clip,
            epochs: self.epochs,
            w: self.w,
            m: self.m,
            seed: self.seed,
            mode: self.mode,
        }
    }
}

pub fn cmd_train_lstm(cfg: &TrainLstmConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    let text = load_capped_corpus(&cfg.corpus, cfg.max_chars)?;
    let vocab = Vocabulary::build(&text)?;
    let source = corpus_id_from_path(&cfg.corpus);
    let split = corpus::split_corpus(&text, &vocab, cfg.w, cfg.stride, cfg.val_fraction, &source)?;

    println!(
        "train-lstm: corpus {} ({} chars, nu={}), {} train windows, n_h={}, mode={}",
        source,
        text.chars().count(),
        vocab.size(),
        split.train.len(),
        cfg.n_h,
        cfg.mode.as_str()
    );

    let (params, stats) = lstm::train(&cfg.train_config(), &split)?;

    let mut trace_csv = String::from("epoch,train_j,val_j\n");
    for s in &stats {
        trace_csv.push_str(&format!("{},{},{}\n", s.epoch, fmt_opt(s.train_j), s.val_j));
        match s.train_j {
            Some(tj) => println!("train-lstm: epoch {} train J {} val J {}", s.epoch, tj, s.val_j),
            None => println!("train-lstm: epoch {} (untrained) val J {}", s.epoch, s.val_j),
        }
    }

    let model_json = params.to_json(
        cfg.mode,
        &vocab.manifest_hash(),
        &[("config", compact(cfg))],
    );

    write_artifact(&out_dir, "vocab.json", &vocab.manifest_json())?;
    let model_path = write_artifact(&out_dir, "lstm_model.json", &model_json)?;
    write_artifact(&out_dir, "lstm_loss_trace.csv", &trace_csv)?;
    write_artifact(&out_dir, "train_lstm_config.json", &pretty(cfg))?;
    println!("train-lstm: wrote {}", model_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
    /// Saved model file (hmm-v1 or lstm-v1)
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub corpus: Option<String>,
    /// Vocabulary manifest (defaults to vocab.json beside the model)
    #[arg(long)]
    pub vocab: Option<String>,
    /// Corpus region to score: train, validation or all
    #[arg(long, value_enum)]
    pub split: Option<SplitChoice>,
    #[arg(long)]
    pub w: Option<usize>,
    /// Window stride (defaults to w: non-overlapping scoring)
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateConfig {
    pub model: String,
    pub corpus: String,
    pub vocab: Option<String>,
    pub split: SplitChoice,
    pub w: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub max_chars: Option<usize>,
    pub seed: u64,
    pub out_dir: String,
}

impl EvaluateConfig {
    pub fn resolve(args: EvaluateArgs) -> Result<Self> {
        let file: EvaluateArgs = load_partial(&args.config)?;
        let w = args.w.or(file.w).unwrap_or(corpus::DEFAULT_WINDOW_WIDTH);
        Ok(EvaluateConfig {
            model: args
                .model
                .or(file.model)
                .ok_or_else(|| Error::Config("--model is required".into()))?,
            corpus: args
                .corpus
                .or(file.corpus)
                .ok_or_else(|| Error::Config("--corpus is required".into()))?,
            vocab: args.vocab.or(file.vocab),
            split: args.split.or(file.split).unwrap_or(SplitChoice::Validation),
            w,
            stride: args.stride.or(file.stride).unwrap_or(w),
            val_fraction: args
                .val_fraction
                .or(file.val_fraction)
                .unwrap_or(corpus::DEFAULT_VAL_FRACTION),
            max_chars: args.max_chars.or(file.max_chars),
            seed: args.seed.or(file.seed).unwrap_or(0),
            out_dir: args.out_dir.or(file.out_dir).unwrap_or_else(|| "out".into()),
        })
    }
}

fn model_format(path: &str) -> Result<(String, serde_json::Value)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::ModelFile(format!("{path}: {e}")))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::ModelFile(format!("{path}: invalid JSON: {e}")))?;
    let format = value
        .get("format")
        .and_then(|f| f.as_str())
        .ok_or_else(|| Error::ModelFile(format!("{path}: missing \"format\" field")))?
        .to_string();
    Ok((format, value))
}

/// Mean nats/char of an HMM over the windows: -sum(loglik) / sum(chars).
fn hmm_nats_per_char(params: &HmmParams, set: &corpus::WindowSet) -> Result<f64> {
    let mut total = 0.0;
    let mut chars = 0usize;
    for obs in set.iter() {
        total += hmm::forward(params, obs)?.loglik;
        chars += obs.len();
    }
    Ok(-total / chars as f64)
}

enum LoadedModel {
    Hmm(Box<HmmParams>),
    Lstm(Box<LstmParams>, OutputGateMode),
}

/// Load either model format and verify its vocabulary reference against
/// the manifest before any corpus work happens.
fn load_checked_model(model_path: &str, vocab: &Vocabulary, vocab_path: &str) -> Result<LoadedModel> {
    let (format, _) = model_format(model_path)?;
    let model_text = fs::read_to_string(model_path)
        .map_err(|e| Error::ModelFile(format!("{model_path}: {e}")))?;
    match format.as_str() {
        "lstm-v1" => {
            let (params, mode, vocab_ref) = LstmParams::from_json(&model_text)?;
            check_vocab_ref(model_path, &vocab_ref, vocab, vocab_path)?;
            Ok(LoadedModel::Lstm(Box::new(params), mode))
        }
        "hmm-v1" => {
            let (params, vocab_ref) = HmmParams::from_json(&model_text)?;
            check_vocab_ref(model_path, &vocab_ref, vocab, vocab_path)?;
            Ok(LoadedModel::Hmm(Box::new(params)))
        }
        other => Err(Error::ModelFile(format!(
            "{model_path}: unsupported format {other:?}"
        ))),
    }
}

pub fn cmd_evaluate(cfg: &EvaluateConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    let (vocab, vocab_path) = load_vocab_for_model(&cfg.model, &cfg.vocab)?;
    let model = load_checked_model(&cfg.model, &vocab, &vocab_path)?;

    let text = load_capped_corpus(&cfg.corpus, cfg.max_chars)?;
    let region = cfg.split.region(&text, cfg.val_fraction)?;
    let source = corpus_id_from_path(&cfg.corpus);
    let windows = corpus::encode_windows(region, &vocab, cfg.w, cfg.stride, &source)?;

    let (j_theta, kind) = match &model {
        LoadedModel::Lstm(params, mode) => (lstm::evaluate(params, &windows, *mode)?, "lstm"),
        LoadedModel::Hmm(params) => (hmm_nats_per_char(params, &windows)?, "hmm"),
    };
    let l_theta = -j_theta;

    println!("evaluate: model {} ({kind}) on {} [{}]", cfg.model, source, cfg.split.as_str());
    println!("J(theta) = {j_theta} nats/char");
    println!("L(theta) = {l_theta}");

    let report = serde_json::json!({
        "model": cfg.model,
        "kind": kind,
        "corpus": source,
        "split": cfg.split.as_str(),
        "windows": windows.len(),
        "j_theta": j_theta,
        "l_theta": l_theta,
        "config": cfg,
    });
    write_artifact(&out_dir, "evaluate.json", &pretty(&report))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
    /// Saved hmm-v1 model file
    #[arg(long)]
    pub hmm: Option<String>,
    /// Saved lstm-v1 model file
    #[arg(long)]
    pub lstm: Option<String>,
    #[arg(long)]
    pub corpus: Option<String>,
    /// Vocabulary manifest (defaults to vocab.json beside the HMM model)
    #[arg(long)]
    pub vocab: Option<String>,
    /// HMM trajectory: posterior or viterbi
    #[arg(long)]
    pub hmm_mode: Option<String>,
    #[arg(long, value_enum)]
    pub split: Option<SplitChoice>,
    #[arg(long)]
    pub w: Option<usize>,
    /// Window stride (defaults to w: every timestep weighted once)
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareConfig {
    pub hmm: String,
    pub lstm: String,
    pub corpus: String,
    pub vocab: Option<String>,
    pub hmm_mode: HmmTrajectoryMode,
    pub split: SplitChoice,
    pub w: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub max_chars: Option<usize>,
    pub seed: u64,
    pub out_dir: String,
}

impl CompareConfig {
    pub fn resolve(args: CompareArgs) -> Result<Self> {
        let file: CompareArgs = load_partial(&args.config)?;
        let w = args.w.or(file.w).unwrap_or(corpus::DEFAULT_WINDOW_WIDTH);
        let hmm_mode = match args.hmm_mode.or(file.hmm_mode) {
            Some(s) => HmmTrajectoryMode::parse(&s)?,
            None => HmmTrajectoryMode::Posterior,
        };
        Ok(CompareConfig {
            hmm: args.hmm.or(file.hmm).ok_or_else(|| Error::Config("--hmm is required".into()))?,
            lstm: args
                .lstm
                .or(file.lstm)
                .ok_or_else(|| Error::Config("--lstm is required".into()))?,
            corpus: args
                .corpus
                .or(file.corpus)
                .ok_or_else(|| Error::Config("--corpus is required".into()))?,
            vocab: args.vocab.or(file.vocab),
            hmm_mode,
            split: args.split.or(file.split).unwrap_or(SplitChoice::Validation),
            w,
            stride: args.stride.or(file.stride).unwrap_or(w),
            val_fraction: args
                .val_fraction
                .or(file.val_fraction)
                .unwrap_or(corpus::DEFAULT_VAL_FRACTION),
            max_chars: args.max_chars.or(file.max_chars),
            seed: args.seed.or(file.seed).unwrap_or(0),
            out_dir: args.out_dir.or(file.out_dir).unwrap_or_else(|| "out".into()),
        })
    }
}

pub fn cmd_compare(cfg: &CompareConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    let hmm_text = fs::read_to_string(&cfg.hmm)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", cfg.hmm)))?;
    let (hmm_params, hmm_ref) = HmmParams::from_json(&hmm_text)?;
    let lstm_text = fs::read_to_string(&cfg.lstm)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", cfg.lstm)))?;
    let (lstm_params, lstm_mode, lstm_ref) = LstmParams::from_json(&lstm_text)?;

    let (vocab, vocab_path) = load_vocab_for_model(&cfg.hmm, &cfg.vocab)?;
    check_vocab_ref(&cfg.hmm, &hmm_ref, &vocab, &vocab_path)?;
    check_vocab_ref(&cfg.lstm, &lstm_ref, &vocab, &vocab_path)?;

    if hmm_params.n_states() != lstm_params.n_h {
        return Err(Error::DimensionMismatch(format!(
            "hmm has n_h={} but lstm has n_h={}",
            hmm_params.n_states(),
            lstm_params.n_h
        )));
    }

    let text = load_capped_corpus(&cfg.corpus, cfg.max_chars)?;
    let region = cfg.split.region(&text, cfg.val_fraction)?;
    let source = corpus_id_from_path(&cfg.corpus);
    let windows = corpus::encode_windows(region, &vocab, cfg.w, cfg.stride, &source)?;

    let (psi_h, psi_l) =
        statecmp::trajectories_over(&hmm_params, &lstm_params, &windows, cfg.hmm_mode, lstm_mode)?;
    let alignment = statecmp::align(&psi_h, &psi_l)?;
    let aligned = statecmp::compare_permuted(&psi_h, &psi_l, Some(&alignment.permutation))?;
    let identity = statecmp::compare_permuted(&psi_h, &psi_l, None)?;
    let time_averaged = statecmp::compare_time_averaged(&psi_h, &psi_l, Some(&alignment.permutation))?;

    println!(
        "compare: {} vs {} on {} [{}], T={}",
        cfg.hmm,
        cfg.lstm,
        source,
        cfg.split.as_str(),
        aligned.timesteps
    );
    println!("delta_aligned = {}", aligned.delta);
    println!("delta_identity = {}", identity.delta);
    println!("delta_time_averaged = {}", time_averaged);
    println!("hmm_mode = {} lstm_mode = {}", cfg.hmm_mode.as_str(), lstm_mode.as_str());

    let report = serde_json::json!({
        "hmm": cfg.hmm,
        "lstm": cfg.lstm,
        "corpus": source,
        "split": cfg.split.as_str(),
        "timesteps": aligned.timesteps,
        "skipped_rows": aligned.skipped_rows,
        "delta_aligned": aligned.delta,
        "delta_identity": identity.delta,
        "delta_time_averaged": time_averaged,
        "alignment": alignment.permutation,
        "hmm_mode": cfg.hmm_mode.as_str(),
        "lstm_mode": lstm_mode.as_str(),
        "config": cfg,
    });
    write_artifact(&out_dir, "compare.json", &pretty(&report))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
    /// Corpus paths (repeatable)
    #[arg(long = "corpus")]
    pub corpora: Option<Vec<String>>,
    /// Comma-separated hidden-state counts
    #[arg(long, value_delimiter = ',')]
    pub n_h_list: Option<Vec<usize>>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    /// LSTM output-gate mode: standard or paper-faithful
    #[arg(long)]
    pub lstm_mode: Option<String>,
    /// HMM trajectory: posterior or viterbi
    #[arg(long)]
    pub hmm_mode: Option<String>,
    #[arg(long)]
    pub bw_max_iters: Option<usize>,
    #[arg(long)]
    pub bw_tol: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_chars: Option<usize>,
    /// Recompute cells even if a completed cell file exists
    #[arg(long)]
    pub no_resume: bool,
    #[arg(long)]
    pub out_dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCliConfig {
    pub corpora: Vec<String>,
    pub sweep: SweepConfig,
    pub resume: bool,
    pub out_dir: String,
}

impl SweepCliConfig {
    pub fn resolve(args: SweepArgs) -> Result<Self> {
        let file: SweepArgs = load_partial(&args.config)?;
        let defaults = SweepConfig::default();
        let corpora = args
            .corpora
            .or(file.corpora)
            .ok_or_else(|| Error::Config("at least one --corpus is required".into()))?;
        if corpora.is_empty() {
            return Err(Error::Config("at least one --corpus is required".into()));
        }
        let n_h_list = args.n_h_list.or(file.n_h_list).unwrap_or(defaults.n_h_list);
        if n_h_list.is_empty() {
            return Err(Error::Config("the n_h list must not be empty".into()));
        }
        let optimizer = match args.optimizer.or(file.optimizer) {
            Some(s) => OptimizerKind::parse(&s)?,
            None => defaults.optimizer,
        };
        let lstm_mode = match args.lstm_mode.or(file.lstm_mode) {
            Some(s) => OutputGateMode::parse(&s)?,
            None => defaults.lstm_mode,
        };
        let hmm_mode = match args.hmm_mode.or(file.hmm_mode) {
            Some(s) => HmmTrajectoryMode::parse(&s)?,
            None => defaults.hmm_mode,
        };
        Ok(SweepCliConfig {
            corpora,
            sweep: SweepConfig {
                n_h_list,
                w: args.w.or(file.w).unwrap_or(defaults.w),
                stride: args.stride.or(file.stride).unwrap_or(defaults.stride),
                m: args.m.or(file.m).unwrap_or(defaults.m),
                epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
                lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
                clip: args.clip.or(file.clip).unwrap_or(defaults.clip),
                optimizer,
                lstm_mode,
                hmm_mode,
                bw_max_iters: args.bw_max_iters.or(file.bw_max_iters).unwrap_or(defaults.bw_max_iters),
                bw_tol: args.bw_tol.or(file.bw_tol).unwrap_or(defaults.bw_tol),
                val_fraction: args
                    .val_fraction
                    .or(file.val_fraction)
                    .unwrap_or(defaults.val_fraction),
                seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
                max_chars: args.max_chars.or(file.max_chars),
            },
            resume: !args.no_resume && !file.no_resume,
            out_dir: args.out_dir.or(file.out_dir).unwrap_or_else(|| "out".into()),
        })
    }
}

/// Hash identifying a resolved per-cell configuration; used for resumable
/// sweeps (a completed cell file whose key matches is not recomputed).
fn cell_key(cfg: &SweepConfig, corpus_id: &str, n_h: usize) -> String {
    let mut per_cell = cfg.clone();
    per_cell.n_h_list = vec![n_h];
    let payload = format!("{}|{}|{}", corpus_id, n_h, compact(&per_cell));
    let digest = Sha256::digest(payload.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Serialize, Deserialize)]
struct CellFile {
    key: String,
    record: statecmp::CellRecord,
}

pub fn cmd_sweep(cfg: &SweepCliConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    let cells_dir = out_dir.join("cells");

    let mut corpora = Vec::with_capacity(cfg.corpora.len());
    for path in &cfg.corpora {
        let text = corpus::load_text(Path::new(path))?;
        corpora.push((corpus_id_from_path(path), text));
    }

    write_artifact(&out_dir, "sweep_config.json", &pretty(cfg))?;

    let mut cells = Vec::new();
    for (corpus_id, text) in &corpora {
        for &n_h in &cfg.sweep.n_h_list {
            let key = cell_key(&cfg.sweep, corpus_id, n_h);
            let cell_path = cells_dir.join(format!("{corpus_id}_nh{n_h}_{key}.json"));
            let mut record = None;
            if cfg.resume {
                if let Ok(text) = fs::read_to_string(&cell_path) {
                    if let Ok(cf) = serde_json::from_str::<CellFile>(&text) {
                        if cf.key == key {
                            println!("sweep: cell {corpus_id} n_h={n_h} already complete, skipping");
                            record = Some(cf.record);
                        }
                    }
                }
            }
            let record = match record {
                Some(r) => r,
                None => {
                    let rec = match statecmp::run_cell(corpus_id, text, n_h, &cfg.sweep) {
                        Ok(cell) => {
                            println!(
                                "sweep: cell {corpus_id} n_h={n_h} delta_aligned={} delta_identity={} j_theta={}",
                                cell.delta_aligned, cell.delta_identity, cell.j_theta
                            );
                            statecmp::CellRecord {
                                n_h,
                                corpus: corpus_id.clone(),
                                cell: Some(cell),
                                error: None,
                            }
                        }
                        Err(e) => {
                            eprintln!("sweep: cell {corpus_id} n_h={n_h} failed: {e}");
                            statecmp::CellRecord {
                                n_h,
                                corpus: corpus_id.clone(),
                                cell: None,
                                error: Some(e.to_string()),
                            }
                        }
                    };
                    fs::create_dir_all(&cells_dir)?;
                    fs::write(
                        &cell_path,
                        pretty(&CellFile { key: key.clone(), record: rec.clone() }),
                    )?;
                    rec
                }
            };
            cells.push(record);
        }
    }

    let report = statecmp::SweepReport { config: cfg.sweep.clone(), cells };
    write_artifact(&out_dir, "sweep_report.csv", &report.csv())?;

    let report_json = serde_json::json!({
        "config": cfg,
        "cells": report.cells,
    });
    write_artifact(&out_dir, "sweep_report.json", &pretty(&report_json))?;

    let ok = report.succeeded();
    let total = report.cells.len();
    println!("sweep: {ok}/{total} cells succeeded, report at {}", out_dir.join("sweep_report.csv").display());
    if ok == 0 {
        return Err(Error::SweepFailed(format!("all {total} cells failed")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<String>,
    /// Saved model file (hmm-v1 or lstm-v1)
    #[arg(long)]
    pub model: Option<String>,
    /// Vocabulary manifest (defaults to vocab.json beside the model)
    #[arg(long)]
    pub vocab: Option<String>,
    /// Priming text for LSTM models
    #[arg(long)]
    pub prompt: Option<String>,
    /// Number of characters to generate
    #[arg(long)]
    pub length: Option<usize>,
    /// Softmax temperature; 0 decodes greedily
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub model: String,
    pub vocab: Option<String>,
    pub prompt: Option<String>,
    pub length: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl GenerateConfig {
    pub fn resolve(args: GenerateArgs) -> Result<Self> {
        let file: GenerateArgs = load_partial(&args.config)?;
        Ok(GenerateConfig {
            model: args
                .model
                .or(file.model)
                .ok_or_else(|| Error::Config("--model is required".into()))?,
            vocab: args.vocab.or(file.vocab),
            prompt: args.prompt.or(file.prompt),
            length: args.length.or(file.length).unwrap_or(100),
            temperature: args.temperature.or(file.temperature).unwrap_or(1.0),
            seed: args.seed.or(file.seed).unwrap_or(0),
        })
    }
}

pub fn cmd_generate(cfg: &GenerateConfig) -> Result<()> {
    let (format, _) = model_format(&cfg.model)?;
    let model_text = fs::read_to_string(&cfg.model)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", cfg.model)))?;
    let (vocab, vocab_path) = load_vocab_for_model(&cfg.model, &cfg.vocab)?;
    let mut rng = Rng::new(cfg.seed).derive(seed_tags::GENERATE);

    match format.as_str() {
        "lstm-v1" => {
            let (params, mode, vocab_ref) = LstmParams::from_json(&model_text)?;
            check_vocab_ref(&cfg.model, &vocab_ref, &vocab, &vocab_path)?;
            let prompt = cfg.prompt.clone().unwrap_or_else(|| "\n".to_string());
            let text = lstm::generate(&params, &vocab, &prompt, cfg.length, cfg.temperature, mode, &mut rng)?;
            print!("{text}");
        }
        "hmm-v1" => {
            if cfg.prompt.is_some() {
                return Err(Error::Config(
                    "hmm models sample unconditionally; --prompt is not supported".into(),
                ));
            }
            let (params, vocab_ref) = HmmParams::from_json(&model_text)?;
            check_vocab_ref(&cfg.model, &vocab_ref, &vocab, &vocab_path)?;
            if vocab.size() != params.vocab_size() {
                return Err(Error::DimensionMismatch(format!(
                    "vocabulary has {} symbols, model has nu={}",
                    vocab.size(),
                    params.vocab_size()
                )));
            }
            let ids = hmm::sample(&params, cfg.length, &mut rng);
            print!("{}", vocab.decode(&ids)?);
        }
        other => {
            return Err(Error::ModelFile(format!(
                "{}: unsupported format {other:?}",
                cfg.model
            )))
        }
    }
    Ok(())
}
