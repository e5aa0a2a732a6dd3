//! Synthetic sequence tasks and a byte-level text corpus.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Targets;

/// Token used for padding and for the copy-task delimiter.
pub const FILLER: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Recall,
    CharLm,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Recall => "long_range_recall",
            TaskKind::CharLm => "char_lm",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "long_range_recall" | "recall" => Ok(TaskKind::Recall),
            "char_lm" => Ok(TaskKind::CharLm),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub len: usize,
    pub vocab: usize,
    /// Key-value pairs per recall sequence.
    pub pairs: usize,
    /// Minimum distance from any key to the query.
    pub gap: usize,
    /// Text file for `char_lm`.
    pub corpus: Option<PathBuf>,
    /// Validation and test fractions of the corpus; the rest is training data.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Recall,
            len: 256,
            vocab: 32,
            pairs: 1,
            gap: 192,
            corpus: None,
            val_fraction: 0.05,
            test_fraction: 0.05,
        }
    }
}

/// One training or evaluation sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Targets,
}

impl Example {
    /// Next-token targets, if this is a language-modelling example.
    pub fn token_targets(&self) -> Option<&[Option<usize>]> {
        match &self.targets {
            Targets::Tokens(t) => Some(t),
            Targets::Class(_) => None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("task.{key}"), msg));
        if self.len == 0 {
            return bad("len", "must be at least 1".into());
        }
        match self.kind {
            TaskKind::Recall => {
                if self.pairs == 0 {
                    return bad("pairs", "must be at least 1".into());
                }
                if self.gap + 2 * self.pairs + 1 > self.len {
                    return bad(
                        "gap",
                        format!(
                            "gap {} + 2·{} pairs + 1 exceeds length {}",
                            self.gap, self.pairs, self.len
                        ),
                    );
                }
                let (keys, values) = recall_split(self.vocab);
                if keys < self.pairs || values == 0 {
                    return bad(
                        "vocab",
                        format!("{} tokens leave too few keys for {} pairs", self.vocab, self.pairs),
                    );
                }
            }
            TaskKind::Copy => {
                if self.vocab < 2 {
                    return bad("vocab", "copy needs at least 2 tokens".into());
                }
                if self.len < 2 {
                    return bad("len", "copy needs length at least 2".into());
                }
            }
            TaskKind::CharLm => {
                if self.vocab != 256 {
                    return bad("vocab", "byte-level corpus needs vocab 256".into());
                }
                if self.corpus.is_none() {
                    return bad("corpus", "char_lm needs a corpus path".into());
                }
                let (v, t) = (self.val_fraction, self.test_fraction);
                if !(v > 0.0 && t >= 0.0 && v + t < 1.0) {
                    return bad("val_fraction", format!("fractions {v}, {t} do not leave training data"));
                }
            }
        }
        Ok(())
    }
}

/// Number of key and value tokens in a recall vocabulary.
pub fn recall_split(vocab: usize) -> (usize, usize) {
    let usable = vocab.saturating_sub(1);
    let keys = usable / 2;
    (keys, usable - keys)
}

/// `k₁ v₁ … k_m v_m` at a random offset in filler, then the query `k_j`
/// at the final position; only the final position has a target, `v_j`.
///
/// Keys are tokens `1..=keys`, values the tokens above them. The pairs are
/// placed so every key sits at least `gap` positions before the query.
pub fn gen_long_range_recall(spec: &TaskSpec, rng: &mut impl Rng) -> Result<Example> {
    spec.validate()?;
    let (len, m) = (spec.len, spec.pairs);
    let (n_keys, n_values) = recall_split(spec.vocab);
    // key j sits at o + 2j and must be ≥ gap before L − 1
    let max_offset = (len - 1 - spec.gap - 2 * (m - 1)).min(len - 1 - 2 * m);
    let offset = rng.random_range(0..=max_offset);
    let keys: Vec<usize> = index::sample(rng, n_keys, m).iter().map(|k| k + 1).collect();
    let values: Vec<usize> = (0..m).map(|_| 1 + n_keys + rng.random_range(0..n_values)).collect();
    let j = rng.random_range(0..m);

    let mut tokens = vec![FILLER; len];
    for (i, (&k, &v)) in keys.iter().zip(&values).enumerate() {
        tokens[offset + 2 * i] = k;
        tokens[offset + 2 * i + 1] = v;
    }
    tokens[len - 1] = keys[j];
    let mut targets = vec![None; len];
    targets[len - 1] = Some(values[j]);
    Ok(Example {
        tokens,
        targets: Targets::Tokens(targets),
    })
}

/// `s, FILLER, s…`: after the delimiter each position predicts the next
/// token of the source string `s` of length `⌊(L−1)/2⌋`.
pub fn gen_copy(spec: &TaskSpec, rng: &mut impl Rng) -> Result<Example> {
    spec.validate()?;
    let len = spec.len;
    let n = ((len - 1) / 2).max(1);
    let source: Vec<usize> = (0..n).map(|_| rng.random_range(1..spec.vocab)).collect();
    let mut tokens = source.clone();
    tokens.push(FILLER);
    tokens.extend_from_slice(&source);
    tokens.truncate(len);
    tokens.resize(len, FILLER);
    let mut targets = vec![None; len];
    for (i, &s) in source.iter().enumerate() {
        if n + i < len {
            targets[n + i] = Some(s);
        }
    }
    Ok(Example {
        tokens,
        targets: Targets::Tokens(targets),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A text file split into contiguous train / validation / test byte ranges.
#[derive(Clone, Debug)]
pub struct CharCorpus {
    bytes: Vec<u8>,
    train: Range<usize>,
    val: Range<usize>,
    test: Range<usize>,
    seg_len: usize,
}

/// Reads `path` as bytes and splits it for segments of `len + 1` bytes.
pub fn load_char_corpus(path: &Path, val_fraction: f64, test_fraction: f64, len: usize) -> Result<CharCorpus> {
    let bytes = std::fs::read(path)?;
    CharCorpus::new(bytes, val_fraction, test_fraction, len)
}

impl CharCorpus {
    pub fn new(bytes: Vec<u8>, val_fraction: f64, test_fraction: f64, len: usize) -> Result<Self> {
        let min = 10 * len;
        if bytes.len() < min {
            return Err(Error::CorpusTooShort { len: bytes.len(), min });
        }
        if !(val_fraction > 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions {val_fraction}, {test_fraction}"
            )));
        }
        let n = bytes.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_train = n - n_val - n_test;
        let corpus = CharCorpus {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..n,
            bytes,
            seg_len: len + 1,
        };
        for split in [Split::Train, Split::Val] {
            if corpus.segment_count(split) == 0 {
                return Err(Error::CorpusTooShort {
                    len: corpus.bytes.len(),
                    min: corpus.seg_len * 2,
                });
            }
        }
        Ok(corpus)
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// `⌊split bytes / (L + 1)⌋`.
    pub fn segment_count(&self, split: Split) -> usize {
        self.range(split).len() / self.seg_len
    }

    pub fn segment(&self, split: Split, i: usize) -> &[u8] {
        let start = self.range(split).start + i * self.seg_len;
        &self.bytes[start..start + self.seg_len]
    }

    /// Segment `i` as an example: tokens are the first `L` bytes, targets
    /// the last `L`.
    pub fn example(&self, split: Split, i: usize) -> Example {
        let seg = self.segment(split, i);
        let n = seg.len() - 1;
        Example {
            tokens: seg[..n].iter().map(|&b| b as usize).collect(),
            targets: Targets::Tokens(seg[1..].iter().map(|&b| Some(b as usize)).collect()),
        }
    }
}

/// Example source for training and evaluation.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    corpus: Option<CharCorpus>,
}

/// Fixed stream tags keep training and evaluation samples disjoint.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const EVAL_STREAM: u64 = 0x6576_616c_0000;

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z = (z ^ (z >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    z ^ (z >> 33)
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let corpus = match spec.kind {
            TaskKind::CharLm => {
                let path = spec.corpus.as_ref().expect("validated");
                Some(load_char_corpus(path, spec.val_fraction, spec.test_fraction, spec.len)?)
            }
            _ => None,
        };
        Ok(Task { spec, corpus })
    }

    /// A char-LM task over in-memory text.
    pub fn from_corpus(spec: TaskSpec, corpus: CharCorpus) -> Result<Self> {
        if spec.kind != TaskKind::CharLm || spec.vocab != 256 {
            return Err(Error::InvalidArgument("corpus tasks are byte-level char_lm".into()));
        }
        Ok(Task {
            spec,
            corpus: Some(corpus),
        })
    }

    pub fn corpus(&self) -> Option<&CharCorpus> {
        self.corpus.as_ref()
    }

    fn synthetic(&self, seed: u64) -> Result<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.spec.kind {
            TaskKind::Recall => gen_long_range_recall(&self.spec, &mut rng),
            TaskKind::Copy => gen_copy(&self.spec, &mut rng),
            TaskKind::CharLm => unreachable!("corpus task"),
        }
    }

    /// Training example `index` of optimizer step `step`; a pure function
    /// of `(seed, step, index)`.
    pub fn train_example(&self, seed: u64, step: usize, index: usize) -> Result<Example> {
        let s = stream_seed(seed, TRAIN_STREAM ^ step as u64, index as u64);
        match &self.corpus {
            Some(c) => {
                let n = c.segment_count(Split::Train);
                let i = ChaCha8Rng::seed_from_u64(s).random_range(0..n);
                Ok(c.example(Split::Train, i))
            }
            None => self.synthetic(s),
        }
    }

    /// Up to `max` evaluation examples: held-out synthetic samples, or the
    /// validation (or test) segments of the corpus.
    pub fn eval_examples(&self, seed: u64, max: usize, split: Split) -> Result<Vec<Example>> {
        match &self.corpus {
            Some(c) => {
                let n = c.segment_count(split).min(max);
                Ok((0..n).map(|i| c.example(split, i)).collect())
            }
            None => {
                let stream = match split {
                    Split::Test => EVAL_STREAM ^ 1,
                    _ => EVAL_STREAM,
                };
                (0..max)
                    .map(|i| self.synthetic(stream_seed(seed, stream, i as u64)))
                    .collect()
            }
        }
    }
}
