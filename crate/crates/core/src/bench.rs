//! Forward + backward timing and peak-memory scaling across model variants.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LocalityPattern;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, Placement, SpadeModel, Targets};
use crate::tensor::memory::{self, BudgetExceeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    Window,
    Chunk,
    SpadeWindow,
    SpadeChunk,
    SsmOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Window,
        Variant::Chunk,
        Variant::SpadeWindow,
        Variant::SpadeChunk,
        Variant::SsmOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Window => "window",
            Variant::Chunk => "chunk",
            Variant::SpadeWindow => "spade_window",
            Variant::SpadeChunk => "spade_chunk",
            Variant::SsmOnly => "ssm_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub warmup_reps: usize,
    pub reps: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub chunk: usize,
    pub vocab: usize,
    pub d_state: usize,
    /// Activation-memory budget in bytes; exceeding it records an `oom` row.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::ALL.to_vec(),
            lengths: vec![512, 1024, 2048, 4096, 8192],
            warmup_reps: 2,
            reps: 5,
            d: 64,
            depth: 4,
            heads: 2,
            window: 32,
            chunk: 64,
            vocab: 64,
            d_state: 32,
            memory_limit: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("bench.{key}"), msg));
        if self.variants.is_empty() {
            return bad("variants", "no variants listed".into());
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return bad("lengths", "need at least one positive length".into());
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lengths", "must be strictly ascending".into());
        }
        if self.reps < 5 {
            return bad("reps", format!("{} timed repetitions; at least 5 required", self.reps));
        }
        self.model_config(Variant::SpadeWindow)?.validate()
    }

    /// Model for a variant; every variant shares d, depth and heads.
    pub fn model_config(&self, variant: Variant) -> Result<ModelConfig> {
        let (pattern, placement, architecture) = match variant {
            Variant::Full => (LocalityPattern::full(true), Placement::None, Architecture::Hybrid),
            Variant::Window => (LocalityPattern::window(self.window, true), Placement::None, Architecture::Hybrid),
            Variant::Chunk => (LocalityPattern::chunk(self.chunk, true), Placement::None, Architecture::Hybrid),
            Variant::SpadeWindow => (
                LocalityPattern::window(self.window, true),
                Placement::Bottom(1),
                Architecture::Hybrid,
            ),
            Variant::SpadeChunk => (
                LocalityPattern::chunk(self.chunk, true),
                Placement::Bottom(1),
                Architecture::Hybrid,
            ),
            Variant::SsmOnly => (LocalityPattern::window(self.window, true), Placement::None, Architecture::SsmOnly),
        };
        Ok(ModelConfig {
            vocab: self.vocab,
            d: self.d,
            depth: self.depth,
            heads: self.heads,
            pattern,
            placement,
            architecture,
            d_state: self.d_state,
            seed: self.seed,
            ..ModelConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub variant: String,
    pub len: usize,
    /// Median forward + backward seconds over the timed repetitions.
    pub seconds: f64,
    /// Peak bytes allocated above what was live before the pass.
    pub peak_bytes: usize,
    pub reps: usize,
    /// `ok`, or `oom` when the memory budget was exceeded.
    pub status: String,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    /// Fitted time exponent per variant (variants with < 2 successful lengths omitted).
    pub time: BTreeMap<String, f64>,
    /// Fitted activation-memory exponent per variant.
    pub memory: BTreeMap<String, f64>,
}

pub fn exponents(rows: &[ScalingRow]) -> Exponents {
    let mut time = BTreeMap::new();
    let mut mem = BTreeMap::new();
    let mut by_variant: BTreeMap<&str, Vec<&ScalingRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        by_variant.entry(&r.variant).or_default().push(r);
    }
    for (v, rs) in by_variant {
        let t: Vec<_> = rs.iter().map(|r| (r.len as f64, r.seconds)).collect();
        let m: Vec<_> = rs.iter().map(|r| (r.len as f64, r.peak_bytes.max(1) as f64)).collect();
        if let Some(e) = fit_exponent(&t) {
            time.insert(v.to_string(), e);
        }
        if let Some(e) = fit_exponent(&m) {
            mem.insert(v.to_string(), e);
        }
    }
    Exponents { time, memory: mem }
}

/// One forward + backward pass; returns the activation peak in bytes.
fn pass(model: &SpadeModel<f32>, tokens: &[usize], targets: &Targets) -> Result<usize> {
    let base = memory::live_bytes();
    memory::reset_peak();
    model.loss_and_grads(tokens, targets, 0.0, 0)?;
    Ok(memory::peak_bytes().saturating_sub(base))
}

/// Runs `f` under the configured activation budget. `Ok(Err(bytes))`
/// means the budget was exceeded at `bytes`.
fn budgeted<R>(limit: Option<usize>, f: impl FnOnce() -> Result<R>) -> Result<std::result::Result<R, usize>> {
    memory::set_limit(limit.map(|l| l + memory::live_bytes()));
    let result = panic::catch_unwind(AssertUnwindSafe(f));
    memory::set_limit(None);
    match result {
        Ok(r) => r.map(Ok),
        Err(payload) => match payload.downcast::<BudgetExceeded>() {
            Ok(b) => Ok(Err(b.requested)),
            Err(other) => panic::resume_unwind(other),
        },
    }
}

struct Subject {
    variant: Variant,
    model: SpadeModel<f32>,
    times: Vec<f64>,
    peak: usize,
    oom: Option<usize>,
}

/// Times every variant at one length.
///
/// Repetitions alternate between variants, so a stretch of slow machine
/// time lands on all of them instead of one; each row reports the median.
pub fn bench_length(cfg: &BenchConfig, variants: &[Variant], len: usize) -> Result<Vec<ScalingRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ len as u64);
    let tokens: Vec<usize> = (0..len + 1).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let targets = Targets::Tokens(tokens[1..].iter().map(|&t| Some(t)).collect());
    let tokens = &tokens[..len];

    let mut subjects = variants
        .iter()
        .map(|&variant| {
            Ok(Subject {
                variant,
                model: SpadeModel::new(cfg.model_config(variant)?)?,
                times: Vec::with_capacity(cfg.reps),
                peak: 0,
                oom: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for rep in 0..cfg.warmup_reps + cfg.reps {
        for s in subjects.iter_mut().filter(|s| s.oom.is_none()) {
            let start = Instant::now();
            match budgeted(cfg.memory_limit, || pass(&s.model, tokens, &targets))? {
                Ok(peak) => {
                    let secs = start.elapsed().as_secs_f64();
                    s.peak = s.peak.max(peak);
                    if rep >= cfg.warmup_reps {
                        s.times.push(secs);
                    }
                }
                Err(requested) => s.oom = Some(requested),
            }
        }
    }
    Ok(subjects
        .into_iter()
        .map(|mut s| {
            let (seconds, peak_bytes, status) = match s.oom {
                Some(requested) => (f64::NAN, requested, "oom"),
                None => {
                    s.times.sort_by(f64::total_cmp);
                    (s.times[s.times.len() / 2], s.peak, "ok")
                }
            };
            ScalingRow {
                variant: s.variant.to_string(),
                len,
                seconds,
                peak_bytes,
                reps: cfg.reps,
                status: status.to_string(),
            }
        })
        .collect())
}

/// Times one variant at one length.
pub fn bench_one(cfg: &BenchConfig, variant: Variant, len: usize) -> Result<ScalingRow> {
    Ok(bench_length(cfg, &[variant], len)?.remove(0))
}

/// Every (variant, length) pair; `on_row` sees rows as they finish.
pub fn bench_scaling(cfg: &BenchConfig, mut on_row: impl FnMut(&ScalingRow)) -> Result<(Vec<ScalingRow>, Exponents)> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        for r in bench_length(cfg, &cfg.variants, len)? {
            on_row(&r);
            rows.push(r);
        }
    }
    let e = exponents(&rows);
    Ok((rows, e))
}
