//! The run configuration file: INI-style sections of `key = value` pairs.
//!
//! Every key has a default, so a file only lists what it changes. The
//! recognized sections and keys are exactly those written by
//! [`RunConfig::to_ini`]; anything else is rejected with the key named.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;

use crate::attention::PatternKind;
use crate::bench::{BenchConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Placement};
use crate::train::{Split, TaskKind, TaskSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub placements: Vec<Placement>,
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            placements: vec![
                Placement::Bottom(1),
                Placement::Bottom(2),
                Placement::Bottom(3),
                Placement::All,
                Placement::Top1,
            ],
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub windows: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            windows: vec![16, 32, 64],
            lengths: vec![128, 256],
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Checkpoint to evaluate; defaults to `<out>/checkpoint.spade`.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    /// Overrides the task length at evaluation time (extrapolation).
    pub len: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            split: Split::Val,
            len: None,
        }
    }
}

/// Everything a `spade` invocation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            ablate: AblateConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse<F: FromStr>(key: &str, value: &str) -> Result<F> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_with<F>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<F>) -> Result<F> {
    f(value.trim()).map_err(|e| Error::config(key, e.to_string()))
}

fn parse_list<F: FromStr>(key: &str, value: &str) -> Result<Vec<F>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<D: fmt::Display>(items: &[D]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn opt<D: fmt::Display>(v: &Option<D>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let v = value;
        let m = &mut self.model;
        let t = &mut self.train;
        let b = &mut self.bench;
        match (section, key) {
            ("run", "out") => self.out = PathBuf::from(v.trim()),
            ("run", "seed") => self.seed = parse(k, v)?,
            ("run", "precision") => self.precision = parse_with(k, v, str::parse)?,
            ("run", "workers") => t.workers = parse(k, v)?,

            ("model", "vocab") => m.vocab = parse(k, v)?,
            ("model", "d") => m.d = parse(k, v)?,
            ("model", "depth") => m.depth = parse(k, v)?,
            ("model", "heads") => m.heads = parse(k, v)?,
            ("model", "pattern") => m.pattern.kind = parse_with(k, v, str::parse::<PatternKind>)?,
            ("model", "window") => m.pattern.window = parse(k, v)?,
            ("model", "chunk") => m.pattern.chunk = parse(k, v)?,
            ("model", "causal") => m.pattern.causal = parse(k, v)?,
            ("model", "placement") => m.placement = parse_with(k, v, str::parse)?,
            ("model", "architecture") => m.architecture = parse_with(k, v, str::parse)?,
            ("model", "d_state") => m.d_state = parse(k, v)?,
            ("model", "ffn_mult") => m.ffn_mult = parse(k, v)?,
            ("model", "ffn_hidden") => m.ffn_hidden = parse(k, v)?,
            ("model", "ssm_trainable") => m.ssm_trainable = parse(k, v)?,
            ("model", "tie_embeddings") => m.tie_embeddings = parse(k, v)?,
            ("model", "classes") => m.classes = parse(k, v)?,

            ("task", "kind") => self.task.kind = parse_with(k, v, str::parse::<TaskKind>)?,
            ("task", "len") => self.task.len = parse(k, v)?,
            ("task", "vocab") => self.task.vocab = parse(k, v)?,
            ("task", "pairs") => self.task.pairs = parse(k, v)?,
            ("task", "gap") => self.task.gap = parse(k, v)?,
            ("task", "corpus") => {
                let p = v.trim();
                self.task.corpus = (!p.is_empty()).then(|| PathBuf::from(p));
            }
            ("task", "val_fraction") => self.task.val_fraction = parse(k, v)?,
            ("task", "test_fraction") => self.task.test_fraction = parse(k, v)?,

            ("train", "lr") => t.lr = parse(k, v)?,
            ("train", "beta1") => t.adam.beta1 = parse(k, v)?,
            ("train", "beta2") => t.adam.beta2 = parse(k, v)?,
            ("train", "eps") => t.adam.eps = parse(k, v)?,
            ("train", "weight_decay") => t.adam.weight_decay = parse(k, v)?,
            ("train", "clip") => t.clip = parse(k, v)?,
            ("train", "dropout") => t.dropout = parse(k, v)?,
            ("train", "batch_size") => t.batch_size = parse(k, v)?,
            ("train", "steps") => t.steps = parse(k, v)?,
            ("train", "warmup") => t.warmup = parse(k, v)?,
            ("train", "eval_every") => t.eval_every = parse(k, v)?,
            ("train", "eval_samples") => t.eval_samples = parse(k, v)?,
            ("train", "record_time") => t.record_time = parse(k, v)?,

            ("eval", "checkpoint") => {
                let p = v.trim();
                self.eval.checkpoint = (!p.is_empty()).then(|| PathBuf::from(p));
            }
            ("eval", "split") => {
                self.eval.split = match v.trim() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    other => return Err(Error::config(k, format!("unknown split `{other}`"))),
                }
            }
            ("eval", "len") => {
                self.eval.len = if v.trim().is_empty() { None } else { Some(parse(k, v)?) }
            }

            ("bench", "variants") => {
                b.variants = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_with(k, s, str::parse::<Variant>))
                    .collect::<Result<_>>()?
            }
            ("bench", "lengths") => b.lengths = parse_list(k, v)?,
            ("bench", "warmup_reps") => b.warmup_reps = parse(k, v)?,
            ("bench", "reps") => b.reps = parse(k, v)?,
            ("bench", "d") => b.d = parse(k, v)?,
            ("bench", "depth") => b.depth = parse(k, v)?,
            ("bench", "heads") => b.heads = parse(k, v)?,
            ("bench", "window") => b.window = parse(k, v)?,
            ("bench", "chunk") => b.chunk = parse(k, v)?,
            ("bench", "vocab") => b.vocab = parse(k, v)?,
            ("bench", "d_state") => b.d_state = parse(k, v)?,
            ("bench", "memory_limit") => {
                b.memory_limit = if v.trim().is_empty() { None } else { Some(parse(k, v)?) }
            }

            ("ablate", "placements") => {
                self.ablate.placements = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_with(k, s, str::parse::<Placement>))
                    .collect::<Result<_>>()?
            }
            ("ablate", "seeds") => self.ablate.seeds = parse(k, v)?,

            ("sweep", "windows") => self.sweep.windows = parse_list(k, v)?,
            ("sweep", "lengths") => self.sweep.lengths = parse_list(k, v)?,
            ("sweep", "seeds") => self.sweep.seeds = parse(k, v)?,

            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override from the command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(path.trim(), "override key must be section.key"))?;
        self.set(section, key, value)
    }

    /// Every setting as `(section, key, value)` in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let b = &self.bench;
        vec![
            ("run", "out", self.out.display().to_string()),
            ("run", "seed", self.seed.to_string()),
            ("run", "precision", self.precision.to_string()),
            ("run", "workers", t.workers.to_string()),
            ("model", "vocab", m.vocab.to_string()),
            ("model", "d", m.d.to_string()),
            ("model", "depth", m.depth.to_string()),
            ("model", "heads", m.heads.to_string()),
            ("model", "pattern", m.pattern.kind.as_str().to_string()),
            ("model", "window", m.pattern.window.to_string()),
            ("model", "chunk", m.pattern.chunk.to_string()),
            ("model", "causal", m.pattern.causal.to_string()),
            ("model", "placement", m.placement.to_string()),
            ("model", "architecture", m.architecture.to_string()),
            ("model", "d_state", m.d_state.to_string()),
            ("model", "ffn_mult", m.ffn_mult.to_string()),
            ("model", "ffn_hidden", m.ffn_hidden.to_string()),
            ("model", "ssm_trainable", m.ssm_trainable.to_string()),
            ("model", "tie_embeddings", m.tie_embeddings.to_string()),
            ("model", "classes", m.classes.to_string()),
            ("task", "kind", self.task.kind.to_string()),
            ("task", "len", self.task.len.to_string()),
            ("task", "vocab", self.task.vocab.to_string()),
            ("task", "pairs", self.task.pairs.to_string()),
            ("task", "gap", self.task.gap.to_string()),
            ("task", "corpus", opt(&self.task.corpus.as_ref().map(|p| p.display()))),
            ("task", "val_fraction", self.task.val_fraction.to_string()),
            ("task", "test_fraction", self.task.test_fraction.to_string()),
            ("train", "lr", t.lr.to_string()),
            ("train", "beta1", t.adam.beta1.to_string()),
            ("train", "beta2", t.adam.beta2.to_string()),
            ("train", "eps", t.adam.eps.to_string()),
            ("train", "weight_decay", t.adam.weight_decay.to_string()),
            ("train", "clip", t.clip.to_string()),
            ("train", "dropout", t.dropout.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "steps", t.steps.to_string()),
            ("train", "warmup", t.warmup.to_string()),
            ("train", "eval_every", t.eval_every.to_string()),
            ("train", "eval_samples", t.eval_samples.to_string()),
            ("train", "record_time", t.record_time.to_string()),
            ("eval", "checkpoint", opt(&self.eval.checkpoint.as_ref().map(|p| p.display()))),
            ("eval", "split", split_name(self.eval.split).to_string()),
            ("eval", "len", opt(&self.eval.len)),
            ("bench", "variants", join(&b.variants)),
            ("bench", "lengths", join(&b.lengths)),
            ("bench", "warmup_reps", b.warmup_reps.to_string()),
            ("bench", "reps", b.reps.to_string()),
            ("bench", "d", b.d.to_string()),
            ("bench", "depth", b.depth.to_string()),
            ("bench", "heads", b.heads.to_string()),
            ("bench", "window", b.window.to_string()),
            ("bench", "chunk", b.chunk.to_string()),
            ("bench", "vocab", b.vocab.to_string()),
            ("bench", "d_state", b.d_state.to_string()),
            ("bench", "memory_limit", opt(&b.memory_limit)),
            ("ablate", "placements", join(&self.ablate.placements)),
            ("ablate", "seeds", self.ablate.seeds.to_string()),
            ("sweep", "windows", join(&self.sweep.windows)),
            ("sweep", "lengths", join(&self.sweep.lengths)),
            ("sweep", "seeds", self.sweep.seeds.to_string()),
        ]
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k, v) in self.entries() {
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Defaults overlaid with the settings in `text`.
    pub fn from_ini(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(Error::config(key, "setting outside any [section]"));
                };
                cfg.set(section, key, value)?;
            }
        }
        Ok(cfg)
    }

    /// Propagates the run seed and checks every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.bench.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        if self.ablate.seeds == 0 {
            return Err(Error::config("ablate.seeds", "must be at least 1"));
        }
        if self.sweep.seeds == 0 {
            return Err(Error::config("sweep.seeds", "must be at least 1"));
        }
        Ok(())
    }
}
