use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Mode, SpadeModel, Targets};
use crate::real::Real;
use crate::tensor::{memory, Tensor};

use super::optim::{clip_global_norm, lr_at, Adam, AdamConfig};
use super::tasks::{Example, Split, Task, TaskKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub adam: AdamConfig,
    pub clip: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last one); 0 = only at the end.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Threads computing per-example gradients; 1 = fully sequential.
    pub workers: usize,
    /// Record wall-clock seconds in metrics; off gives byte-identical streams.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            adam: AdamConfig::default(),
            clip: 1.0,
            dropout: 0.1,
            batch_size: 32,
            steps: 10_000,
            warmup: 1000,
            seed: 0,
            eval_every: 500,
            eval_samples: 256,
            workers: 1,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("train.{key}"), msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not a finite non-negative rate", self.lr));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) {
            return bad("beta1", format!("{} not in [0, 1)", a.beta1));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return bad("beta2", format!("{} not in [0, 1)", a.beta2));
        }
        if !(a.eps >= 0.0) {
            return bad("eps", format!("{} is negative", a.eps));
        }
        if !(a.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} is negative", a.weight_decay));
        }
        if !(self.clip >= 0.0) {
            return bad("clip", format!("{} is negative", self.clip));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.warmup > self.steps {
            return bad("warmup", format!("{} exceeds total steps {}", self.warmup, self.steps));
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples", "must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    /// Accuracy for synthetic tasks, perplexity for char-LM.
    pub eval_metric: Option<f64>,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Perplexity,
}

impl Metric {
    pub fn for_task(kind: TaskKind) -> Metric {
        match kind {
            TaskKind::CharLm => Metric::Perplexity,
            _ => Metric::Accuracy,
        }
    }

    /// Whether a larger value is better.
    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean cross-entropy over every supervised position.
    pub loss: f64,
    pub accuracy: f64,
    pub perplexity: f64,
    pub positions: usize,
}

impl EvalResult {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Perplexity => self.perplexity,
        }
    }
}

/// Token-weighted loss, argmax accuracy and perplexity, without dropout.
pub fn evaluate<T: Real>(model: &SpadeModel<T>, examples: &[Example]) -> Result<EvalResult> {
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut positions = 0usize;
    for ex in examples {
        match &ex.targets {
            Targets::Tokens(t) => {
                let logits = model.forward(&ex.tokens, Mode::Lm)?;
                for (i, target) in t.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    let row = logits.row(i);
                    total += token_nll(row, target);
                    correct += (argmax(row) == target) as usize;
                    positions += 1;
                }
            }
            Targets::Class(c) => {
                let logits = model.forward(&ex.tokens, Mode::Classify)?;
                total += token_nll(logits.row(0), *c);
                correct += (argmax(logits.row(0)) == *c) as usize;
                positions += 1;
            }
        }
    }
    if positions == 0 {
        return Err(Error::EmptyEval);
    }
    let loss = total / positions as f64;
    Ok(EvalResult {
        loss,
        accuracy: correct as f64 / positions as f64,
        perplexity: loss.exp(),
        positions,
    })
}

fn token_nll<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    lse - row[target].as_f64()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Final state of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalResult,
    pub checkpoint: Option<PathBuf>,
}

/// Summed loss and gradients of one batch, plus the peak memory any
/// worker reached.
struct BatchGrads<T: Real> {
    loss: f64,
    grads: Vec<Option<Tensor<T>>>,
    peak: usize,
}

fn accumulate<T: Real>(into: &mut [Option<Tensor<T>>], from: Vec<Option<Tensor<T>>>) -> Result<()> {
    for (slot, g) in into.iter_mut().zip(from) {
        match (slot.as_mut(), g) {
            (Some(acc), Some(g)) => acc.add_assign(&g)?,
            (None, Some(g)) => *slot = Some(g),
            (_, None) => {}
        }
    }
    Ok(())
}

fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn batch_grads<T: Real>(
    model: &SpadeModel<T>,
    task: &Task,
    cfg: &TrainConfig,
    step: usize,
) -> Result<BatchGrads<T>> {
    let n = cfg.batch_size;
    let run = |range: std::ops::Range<usize>| -> Result<BatchGrads<T>> {
        let base = memory::live_bytes();
        memory::reset_peak();
        let mut acc = BatchGrads {
            loss: 0.0,
            grads: vec![None; model.params().len()],
            peak: 0,
        };
        for i in range {
            let ex = task.train_example(cfg.seed, step, i)?;
            let (loss, grads) =
                model.loss_and_grads(&ex.tokens, &ex.targets, cfg.dropout, example_seed(cfg.seed, step, i))?;
            acc.loss += loss;
            accumulate(&mut acc.grads, grads)?;
        }
        acc.peak = memory::peak_bytes().saturating_sub(base);
        Ok(acc)
    };
    let workers = cfg.workers.min(n);
    let parts: Vec<Result<BatchGrads<T>>> = if workers <= 1 {
        vec![run(0..n)]
    } else {
        let per = n.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * per).min(n)..((w + 1) * per).min(n);
                    s.spawn(move || run(range))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        })
    };
    let mut total = BatchGrads {
        loss: 0.0,
        grads: vec![None; model.params().len()],
        peak: 0,
    };
    for part in parts {
        let part = part?;
        total.loss += part.loss;
        total.peak = total.peak.max(part.peak);
        accumulate(&mut total.grads, part.grads)?;
    }
    let inv = T::of(1.0 / n as f64);
    for g in total.grads.iter_mut().flatten() {
        g.scale_in_place(inv);
    }
    total.loss /= n as f64;
    Ok(total)
}

/// Trains `model` in place.
///
/// `on_record` sees every metrics row as soon as it exists. With
/// `out_dir` set, the model is checkpointed to `checkpoint.spade` at every
/// evaluation, and a non-finite loss reports that file as the last good
/// state.
pub fn train<T: Real>(
    model: &mut SpadeModel<T>,
    task: &Task,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.spec.validate()?;
    if task.spec.vocab > model.config().vocab {
        return Err(Error::config(
            "task.vocab",
            format!("task uses {} tokens, model vocabulary has {}", task.spec.vocab, model.config().vocab),
        ));
    }
    let metric = Metric::for_task(task.spec.kind);
    let eval_set = task.eval_examples(cfg.seed, cfg.eval_samples, Split::Val)?;
    let mut adam = Adam::new(cfg.adam, model.params().len());
    let start = Instant::now();
    let mut records = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut peak = 0usize;
    let ckpt_path = out_dir.map(|d| d.join("checkpoint.spade"));

    let mut final_eval = None;
    for step in 1..=cfg.steps {
        let mut batch = batch_grads(model, task, cfg, step)?;
        peak = peak.max(batch.peak);
        let grads_finite = batch.grads.iter().flatten().all(|g| g.all_finite());
        if !batch.loss.is_finite() || !grads_finite {
            return Err(Error::NonFiniteLoss {
                step,
                checkpoint: last_good,
            });
        }
        clip_global_norm(&mut batch.grads, cfg.clip);
        adam.step(model.params_mut(), &batch.grads, lr_at(step, cfg.lr, cfg.warmup))?;

        let eval_now = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let (eval_loss, eval_metric) = if eval_now {
            let r = evaluate(model, &eval_set)?;
            if step == cfg.steps {
                final_eval = Some(r);
            }
            if let Some(path) = &ckpt_path {
                save_checkpoint(model, path)?;
                last_good = Some(path.clone());
            }
            (Some(r.loss), Some(r.metric(metric)))
        } else {
            (None, None)
        };
        let record = MetricsRecord {
            step,
            train_loss: batch.loss,
            eval_loss,
            eval_metric,
            seconds: if cfg.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
            peak_bytes: peak,
        };
        on_record(&record)?;
        records.push(record);
    }
    let final_eval = match final_eval {
        Some(r) => r,
        None => evaluate(model, &eval_set)?,
    };
    Ok(TrainOutcome {
        records,
        final_eval,
        checkpoint: last_good,
    })
}
