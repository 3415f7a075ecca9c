//! Corpus ingestion: plain-text loading, character vocabulary, sliding
//! windows with the input/target shift, and epoch-based minibatch sampling.
//!
//! Windows are stored implicitly as (encoded text, width, stride); a window
//! is a slice into the encoded text, so stride-1 windowing of a megabyte
//! corpus costs one `usize` per character, not one copy per window.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Rng;

pub const DEFAULT_WINDOW_WIDTH: usize = 64;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// Ordered character vocabulary. Symbols are the distinct characters of the
/// corpus sorted by Unicode codepoint, so indices are independent of the
/// order in which characters appear in the text.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Corpus("empty text, no vocabulary to build".into()));
        }
        let mut symbols: Vec<char> = text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Ok(Self::from_symbols(symbols))
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocabulary { symbols, index }
    }

    /// Number of distinct symbols.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, i: usize) -> char {
        self.symbols[i]
    }

    /// Encode `text`, failing on the first character outside the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(pos, c)| {
                self.index_of(c).ok_or_else(|| {
                    Error::Corpus(format!(
                        "character {c:?} at position {pos} is not in the vocabulary"
                    ))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.symbols.get(i).copied().ok_or_else(|| {
                    Error::Corpus(format!("symbol index {i} out of range (nu={})", self.size()))
                })
            })
            .collect()
    }

    /// Canonical JSON manifest: `{"symbols":[...],"nu":N}`, compact, with
    /// symbols in index order. The manifest hash identifies the exact
    /// character-to-index mapping a model was trained with.
    pub fn manifest_json(&self) -> String {
        let mut s = String::from("{\"symbols\":[");
        for (i, c) in self.symbols.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            // serde_json escaping keeps control characters stable.
            let _ = write!(s, "{}", serde_json::to_string(c).expect("char serializes"));
        }
        let _ = write!(s, "],\"nu\":{}}}", self.size());
        s
    }

    /// SHA-256 of the canonical manifest bytes, hex-encoded.
    pub fn manifest_hash(&self) -> String {
        hex::encode(Sha256::digest(self.manifest_json().as_bytes()))
    }

    pub fn from_manifest_json(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Manifest {
            symbols: Vec<char>,
            nu: usize,
        }
        let m: Manifest = serde_json::from_str(json)
            .map_err(|e| Error::Corpus(format!("bad vocabulary manifest: {e}")))?;
        if m.symbols.len() != m.nu {
            return Err(Error::Corpus(format!(
                "manifest declares nu={} but lists {} symbols",
                m.nu,
                m.symbols.len()
            )));
        }
        let mut seen = m.symbols.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != m.symbols.len() {
            return Err(Error::Corpus("manifest contains duplicate symbols".into()));
        }
        Ok(Self::from_symbols(m.symbols))
    }
}

/// Read a corpus file as UTF-8 text, preserving newlines, no normalization.
pub fn load_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        Error::Corpus(format!(
            "{}: invalid UTF-8 at byte offset {}",
            path.display(),
            e.utf8_error().valid_up_to()
        ))
    })?;
    if text.is_empty() {
        return Err(Error::Corpus(format!("{}: empty corpus", path.display())));
    }
    Ok(text)
}

/// Sliding windows over an encoded text region.
///
/// Window `k` covers symbols `[k*stride, k*stride + w)`; only full-width
/// windows are emitted.
#[derive(Debug, Clone)]
pub struct WindowSet {
    symbols: Vec<usize>,
    width: usize,
    stride: usize,
    nu: usize,
    source: String,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        if self.symbols.len() < self.width {
            0
        } else {
            (self.symbols.len() - self.width) / self.stride + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Vocabulary size the symbols were encoded against.
    pub fn vocab_size(&self) -> usize {
        self.nu
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn window(&self, k: usize) -> &[usize] {
        let start = k * self.stride;
        &self.symbols[start..start + self.width]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(move |k| self.window(k))
    }

    /// All windows as slices, for APIs that take a sequence list.
    pub fn as_slices(&self) -> Vec<&[usize]> {
        self.iter().collect()
    }
}

/// Encode `text` against `vocab` and slice it into windows.
pub fn encode_windows(
    text: &str,
    vocab: &Vocabulary,
    width: usize,
    stride: usize,
    source: &str,
) -> Result<WindowSet> {
    if width < 2 {
        return Err(Error::Corpus(format!("window width must be >= 2, got {width}")));
    }
    if stride < 1 {
        return Err(Error::Corpus("stride must be >= 1".into()));
    }
    let symbols = vocab.encode(text)?;
    if symbols.len() < width {
        return Err(Error::Corpus(format!(
            "text has {} characters, shorter than window width {width}",
            symbols.len()
        )));
    }
    Ok(WindowSet { symbols, width, stride, nu: vocab.size(), source: source.to_string() })
}

/// A minibatch: `inputs[i]` is a window's first w-1 symbols and
/// `targets[i]` its last w-1, so `targets[i][t]` is the character that
/// follows `inputs[i][t]` in the source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    /// Number of windows in the batch (m).
    pub fn size(&self) -> usize {
        self.inputs.len()
    }
}

/// Assemble the input/target shift for the selected windows.
pub fn to_batch(set: &WindowSet, picks: &[usize]) -> Result<Batch> {
    if picks.is_empty() {
        return Err(Error::Corpus("cannot build a batch from zero windows".into()));
    }
    let mut inputs = Vec::with_capacity(picks.len());
    let mut targets = Vec::with_capacity(picks.len());
    for &k in picks {
        if k >= set.len() {
            return Err(Error::Corpus(format!(
                "window index {k} out of range ({} windows)",
                set.len()
            )));
        }
        let w = set.window(k);
        inputs.push(w[..w.len() - 1].to_vec());
        targets.push(w[1..].to_vec());
    }
    Ok(Batch { inputs, targets })
}

/// Without-replacement minibatch scheduler.
///
/// Each epoch is a fresh seeded permutation of all window indices, consumed
/// in chunks; the final chunk of an epoch may be shorter. Over one epoch
/// every window is visited exactly once.
#[derive(Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl EpochSampler {
    pub fn new(n_windows: usize, mut rng: Rng) -> Result<Self> {
        if n_windows == 0 {
            return Err(Error::Corpus("sampler needs at least one window".into()));
        }
        let mut order: Vec<usize> = (0..n_windows).collect();
        rng.shuffle(&mut order);
        Ok(EpochSampler { order, pos: 0, rng })
    }

    pub fn n_windows(&self) -> usize {
        self.order.len()
    }

    pub fn batches_per_epoch(&self, m: usize) -> usize {
        self.order.len().div_ceil(m)
    }

    /// Next batch of at most `m` window indices. Reshuffles when the
    /// current epoch is exhausted.
    pub fn next_indices(&mut self, m: usize) -> Result<Vec<usize>> {
        if m == 0 {
            return Err(Error::Corpus("batch size must be >= 1".into()));
        }
        if m > self.order.len() {
            return Err(Error::Corpus(format!(
                "batch size {m} exceeds the {} available windows",
                self.order.len()
            )));
        }
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + m).min(self.order.len());
        let picks = self.order[self.pos..end].to_vec();
        self.pos = end;
        Ok(picks)
    }
}

/// Draw the next minibatch of `m` windows from `set`.
pub fn sample_minibatch(set: &WindowSet, m: usize, sampler: &mut EpochSampler) -> Result<Batch> {
    to_batch(set, &sampler.next_indices(m)?)
}

/// Train/validation split over disjoint contiguous text regions.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: WindowSet,
    pub validation: WindowSet,
    pub split_fraction: f64,
}

/// Split `text` at a character boundary: the final `val_fraction` of the
/// characters become the validation region. No window straddles the
/// boundary because the regions are windowed independently.
pub fn split_text(text: &str, val_fraction: f64) -> Result<(&str, &str)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Corpus(format!(
            "validation fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n_chars = text.chars().count();
    let train_chars = n_chars - (n_chars as f64 * val_fraction).floor() as usize;
    let byte_split = text
        .char_indices()
        .nth(train_chars)
        .map(|(b, _)| b)
        .unwrap_or(text.len());
    Ok((&text[..byte_split], &text[byte_split..]))
}

pub fn split_corpus(
    text: &str,
    vocab: &Vocabulary,
    width: usize,
    stride: usize,
    val_fraction: f64,
    source: &str,
) -> Result<CorpusSplit> {
    let (train_text, val_text) = split_text(text, val_fraction)?;
    let train = encode_windows(train_text, vocab, width, stride, source)?;
    let validation = encode_windows(val_text, vocab, width, stride, source).map_err(|e| {
        Error::Corpus(format!("validation region too small for the window width: {e}"))
    })?;
    Ok(CorpusSplit { train, validation, split_fraction: val_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn load_text_preserves_newlines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"ab\ncd").unwrap();
        let text = load_text(f.path()).unwrap();
        assert_eq!(text.chars().count(), 5);
        assert_eq!(text, "ab\ncd");
    }

    #[test]
    fn load_text_empty_file_is_an_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let err = load_text(f.path()).unwrap_err();
        assert!(err.to_string().contains("empty corpus"), "{err}");
    }

    #[test]
    fn load_text_missing_file_names_path() {
        let err = load_text(Path::new("/no/such/corpus.txt")).unwrap_err();
        assert!(err.to_string().contains("/no/such/corpus.txt"), "{err}");
    }

    #[test]
    fn load_text_bad_utf8_reports_offset() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&[b'o', b'k', 0xFF, b'x']).unwrap();
        let err = load_text(f.path()).unwrap_err();
        assert!(err.to_string().contains("byte offset 2"), "{err}");
    }

    #[test]
    fn vocabulary_definition_cases() {
        let v = Vocabulary::build("abab").unwrap();
        assert_eq!(v.symbols(), &['a', 'b']);
        assert_eq!(v.size(), 2);
        let v = Vocabulary::build("a").unwrap();
        assert_eq!(v.size(), 1);
        assert!(Vocabulary::build("").is_err());
    }

    #[test]
    fn vocabulary_sorted_by_codepoint() {
        let v = Vocabulary::build("cba\nB").unwrap();
        assert_eq!(v.symbols(), &['\n', 'B', 'a', 'b', 'c']);
    }

    #[test]
    fn manifest_round_trip_and_hash_stability() {
        let v = Vocabulary::build("hello\nworld\"quote\"").unwrap();
        let json = v.manifest_json();
        let back = Vocabulary::from_manifest_json(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.manifest_hash(), v.manifest_hash());
        // different vocabulary, different hash
        let other = Vocabulary::build("hello worlds").unwrap();
        assert_ne!(other.manifest_hash(), v.manifest_hash());
    }

    #[test]
    fn encode_rejects_unknown_characters() {
        let v = Vocabulary::build("ab").unwrap();
        let err = v.encode("abz").unwrap_err();
        assert!(err.to_string().contains("'z'"), "{err}");
    }

    #[test]
    fn windows_definition_cases() {
        let v = Vocabulary::build("abcde").unwrap();
        let ws = encode_windows("abcd", &v, 3, 1, "t").unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws.window(0), &[0, 1, 2]);
        assert_eq!(ws.window(1), &[1, 2, 3]);

        let ws = encode_windows("abcd", &v, 4, 1, "t").unwrap();
        assert_eq!(ws.len(), 1);

        let ws = encode_windows("abcde", &v, 2, 2, "t").unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws.window(0), &[0, 1]);
        assert_eq!(ws.window(1), &[2, 3]);
    }

    #[test]
    fn windows_shorter_text_is_an_error() {
        let v = Vocabulary::build("ab").unwrap();
        assert!(encode_windows("a", &v, 2, 1, "t").is_err());
        assert!(encode_windows("ab", &v, 1, 1, "t").is_err());
    }

    #[test]
    fn batch_shift_cases() {
        let v = Vocabulary::build("abcx").unwrap();
        let ws = encode_windows("abc", &v, 3, 1, "t").unwrap();
        let b = to_batch(&ws, &[0]).unwrap();
        assert_eq!(b.inputs[0], vec![0, 1]);
        assert_eq!(b.targets[0], vec![1, 2]);

        let ws = encode_windows("xx", &v, 2, 1, "t").unwrap();
        let b = to_batch(&ws, &[0]).unwrap();
        assert_eq!(b.inputs[0], vec![3]);
        assert_eq!(b.targets[0], vec![3]);

        assert!(to_batch(&ws, &[]).is_err());
    }

    #[test]
    fn batch_of_64_windows_has_m_64() {
        let text: String = "abcdefgh".repeat(20);
        let v = Vocabulary::build(&text).unwrap();
        let ws = encode_windows(&text, &v, 8, 1, "t").unwrap();
        assert!(ws.len() >= 64);
        let picks: Vec<usize> = (0..64).collect();
        let b = to_batch(&ws, &picks).unwrap();
        assert_eq!(b.size(), 64);
    }

    #[test]
    fn sampler_exhaustion_is_a_permutation() {
        let rng = Rng::new(3);
        let mut s = EpochSampler::new(10, rng).unwrap();
        let picks = s.next_indices(10).unwrap();
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_epoch_visits_every_window_once() {
        let mut s = EpochSampler::new(13, Rng::new(4)).unwrap();
        let mut seen = Vec::new();
        for _ in 0..s.batches_per_epoch(4) {
            seen.extend(s.next_indices(4).unwrap());
        }
        assert_eq!(seen.len(), 13);
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..13).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_fixed_seed_reproduces_batches() {
        let mut a = EpochSampler::new(50, Rng::new(99)).unwrap();
        let mut b = EpochSampler::new(50, Rng::new(99)).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_indices(7).unwrap(), b.next_indices(7).unwrap());
        }
    }

    #[test]
    fn sampler_rejects_oversized_batches() {
        let mut s = EpochSampler::new(5, Rng::new(0)).unwrap();
        assert!(s.next_indices(6).is_err());
        assert!(s.next_indices(0).is_err());
    }

    #[test]
    fn sample_minibatch_draws_m_windows_deterministically() {
        let text: String = "abcdefgh".repeat(80);
        let v = Vocabulary::build(&text).unwrap();
        let ws = encode_windows(&text, &v, 8, 1, "t").unwrap();
        let mut s1 = EpochSampler::new(ws.len(), Rng::new(42)).unwrap();
        let mut s2 = EpochSampler::new(ws.len(), Rng::new(42)).unwrap();
        let a = sample_minibatch(&ws, DEFAULT_BATCH_SIZE, &mut s1).unwrap();
        let b = sample_minibatch(&ws, DEFAULT_BATCH_SIZE, &mut s2).unwrap();
        assert_eq!(a.size(), 64);
        assert_eq!(a, b);
        // shift contract holds for sampled batches too
        for (inp, tgt) in a.inputs.iter().zip(&a.targets) {
            assert_eq!(&inp[1..], &tgt[..tgt.len() - 1]);
        }
    }

    #[test]
    fn split_regions_are_contiguous_and_disjoint() {
        let text = "0123456789abcdefghij"; // 20 chars
        let (train, val) = split_text(text, 0.1).unwrap();
        assert_eq!(train.chars().count(), 18);
        assert_eq!(val.chars().count(), 2);
        assert_eq!(format!("{train}{val}"), text);
    }
}
