//! The `spade` command line.

mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{bench_scaling, ScalingRow};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, SpadeModel};
use crate::real::Real;
use crate::train::{evaluate, train, Metric, MetricsRecord, Task, TaskSpec, TrainConfig};

pub use config::{AblateConfig, EvalConfig, Precision, RunConfig, SweepConfig};

#[derive(Parser, Debug)]
#[command(name = "spade", version, about = "Train, evaluate and benchmark hybrid SSM / local-attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the configured task.
    Eval(Common),
    /// Time forward + backward passes across variants and lengths.
    Bench(Common),
    /// Train every global-layer placement on the configured task.
    Ablate(Common),
    /// Train over a grid of window sizes and sequence lengths.
    Sweep(Common),
    /// Write the SSM kernel of the first global layer as CSV.
    Kernel(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (INI sections, key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_ini(&text)?
        }
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.finalize()?;
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code: 0 success, 2 configuration error,
/// 3 numeric failure, 4 resource failure, 1 anything else.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    let (common, f): (&Common, fn(&RunConfig) -> Result<()>) = match &cmd {
        Command::Train(c) => (c, cmd_train),
        Command::Eval(c) => (c, cmd_eval),
        Command::Bench(c) => (c, cmd_bench),
        Command::Ablate(c) => (c, cmd_ablate),
        Command::Sweep(c) => (c, cmd_sweep),
        Command::Kernel(c) => (c, cmd_kernel),
    };
    let cfg = load_config(common)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.ini"), cfg.to_ini())?;
    f(&cfg)
}

/// CSV and JSON-lines mirrors of the metrics stream.
struct MetricsSink {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
}

impl MetricsSink {
    fn create(dir: &Path) -> Result<Self> {
        Ok(MetricsSink {
            csv: csv::Writer::from_path(dir.join("metrics.csv"))?,
            jsonl: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
        })
    }

    fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        self.csv.serialize(r)?;
        serde_json::to_writer(&mut self.jsonl, r)?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok(())
    }
}

fn model_config(cfg: &RunConfig) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.seed = cfg.seed;
    m
}

/// Trains one model and returns its final evaluation metric.
fn train_one<T: Real>(
    model_cfg: ModelConfig,
    task: &Task,
    train_cfg: &TrainConfig,
    dir: &Path,
) -> Result<(f64, f64)> {
    fs::create_dir_all(dir)?;
    let mut model = SpadeModel::<T>::new(model_cfg)?;
    let mut sink = MetricsSink::create(dir)?;
    let outcome = train(&mut model, task, train_cfg, Some(dir), |r| sink.write(r))?;
    sink.finish()?;
    save_checkpoint(&model, dir.join("checkpoint.spade"))?;
    let metric = Metric::for_task(task.spec.kind);
    Ok((outcome.final_eval.metric(metric), outcome.final_eval.loss))
}

fn by_precision(
    cfg: &RunConfig,
    model_cfg: ModelConfig,
    task: &Task,
    train_cfg: &TrainConfig,
    dir: &Path,
) -> Result<(f64, f64)> {
    match cfg.precision {
        Precision::F32 => train_one::<f32>(model_cfg, task, train_cfg, dir),
        Precision::F64 => train_one::<f64>(model_cfg, task, train_cfg, dir),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let task = Task::new(cfg.task.clone())?;
    let (metric, loss) = by_precision(cfg, model_config(cfg), &task, &cfg.train, &cfg.out)?;
    println!("final eval: loss {loss:.4}, {} {metric:.4}", metric_name(&task));
    Ok(())
}

fn metric_name(task: &Task) -> &'static str {
    match Metric::for_task(task.spec.kind) {
        Metric::Accuracy => "accuracy",
        Metric::Perplexity => "perplexity",
    }
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    len: usize,
    loss: f64,
    accuracy: f64,
    perplexity: f64,
    positions: usize,
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint.spade"));
    let model: SpadeModel<f32> = load_checkpoint(&path)?;
    let mut spec = cfg.task.clone();
    if let Some(len) = cfg.eval.len {
        spec.len = len;
    }
    let task = Task::new(spec)?;
    let examples = task.eval_examples(cfg.seed, cfg.train.eval_samples, cfg.eval.split)?;
    let r = evaluate(&model, &examples)?;
    let report = EvalReport {
        checkpoint: path.display().to_string(),
        len: task.spec.len,
        loss: r.loss,
        accuracy: r.accuracy,
        perplexity: r.perplexity,
        positions: r.positions,
    };
    fs::write(cfg.out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "eval at L={}: loss {:.4}, accuracy {:.4}, perplexity {:.4}",
        report.len, r.loss, r.accuracy, r.perplexity
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out.join("scaling.csv"))?;
    let mut failed = None;
    let (_, exps) = bench_scaling(&cfg.bench, |r: &ScalingRow| {
        println!("{:>13} L={:<6} {:>10.4}s {:>12} bytes {}", r.variant, r.len, r.seconds, r.peak_bytes, r.status);
        if let Err(e) = w.serialize(r) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e.into());
    }
    w.flush()?;
    fs::write(cfg.out.join("exponents.json"), serde_json::to_string_pretty(&exps)?)?;
    for (v, e) in &exps.time {
        println!("{v}: time exponent {e:.3}");
    }
    Ok(())
}

#[derive(Serialize)]
struct RunRow {
    name: String,
    seed: u64,
    metric: f64,
    eval_loss: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    name: String,
    seeds: usize,
    mean_metric: f64,
    mean_eval_loss: f64,
}

fn seed_runs(
    cfg: &RunConfig,
    name: &str,
    model_cfg: &ModelConfig,
    spec: &TaskSpec,
    seeds: usize,
    runs: &mut csv::Writer<File>,
) -> Result<SummaryRow> {
    let task = Task::new(spec.clone())?;
    let (mut metric, mut loss) = (0.0, 0.0);
    for i in 0..seeds as u64 {
        let seed = cfg.seed + i;
        let mut m = model_cfg.clone();
        m.seed = seed;
        let mut t = cfg.train.clone();
        t.seed = seed;
        let dir = cfg.out.join("runs").join(format!("{name}_seed{seed}"));
        let (v, l) = by_precision(cfg, m, &task, &t, &dir)?;
        println!("{name} seed {seed}: {} {v:.4}", metric_name(&task));
        runs.serialize(RunRow {
            name: name.to_string(),
            seed,
            metric: v,
            eval_loss: l,
        })?;
        runs.flush()?;
        metric += v;
        loss += l;
    }
    Ok(SummaryRow {
        name: name.to_string(),
        seeds,
        mean_metric: metric / seeds as f64,
        mean_eval_loss: loss / seeds as f64,
    })
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    for p in &cfg.ablate.placements {
        p.global_layers(cfg.model.depth)
            .map_err(|e| Error::config("ablate.placements", e.to_string()))?;
    }
    let mut runs = csv::Writer::from_path(cfg.out.join("ablation_runs.csv"))?;
    let mut summary = csv::Writer::from_path(cfg.out.join("ablation.csv"))?;
    for &placement in &cfg.ablate.placements {
        let m = ModelConfig {
            placement,
            ..model_config(cfg)
        };
        let row = seed_runs(cfg, &placement.to_string(), &m, &cfg.task, cfg.ablate.seeds, &mut runs)?;
        summary.serialize(row)?;
    }
    summary.flush()?;
    Ok(())
}

/// Window × length grid of mean final metrics, as written to `sweep.csv`.
pub fn sweep_grid_csv(windows: &[usize], lengths: &[usize], cells: &[Vec<f64>]) -> String {
    let mut out = String::from("window");
    for l in lengths {
        out.push_str(&format!(",len_{l}"));
    }
    out.push('\n');
    for (w, row) in windows.iter().zip(cells) {
        out.push_str(&w.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`sweep_grid_csv`].
pub fn parse_sweep_grid(text: &str) -> Result<(Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty sweep grid".into()))?;
    let bad = |m: &str| Error::InvalidArgument(format!("sweep grid: {m}"));
    let lengths = header
        .split(',')
        .skip(1)
        .map(|h| h.strip_prefix("len_").and_then(|l| l.parse().ok()).ok_or_else(|| bad(h)))
        .collect::<Result<Vec<usize>>>()?;
    let (mut windows, mut cells) = (Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.is_empty()) {
        let mut f = line.split(',');
        windows.push(f.next().and_then(|w| w.parse().ok()).ok_or_else(|| bad(line))?);
        let row = f.map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<Vec<f64>>>()?;
        if row.len() != lengths.len() {
            return Err(bad(line));
        }
        cells.push(row);
    }
    Ok((windows, lengths, cells))
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let mut runs = csv::Writer::from_path(cfg.out.join("sweep_runs.csv"))?;
    let mut cells = Vec::new();
    for &w in &cfg.sweep.windows {
        let mut row = Vec::new();
        for &len in &cfg.sweep.lengths {
            let mut m = model_config(cfg);
            m.pattern.window = w;
            let spec = TaskSpec {
                len,
                ..cfg.task.clone()
            };
            let s = seed_runs(cfg, &format!("w{w}_len{len}"), &m, &spec, cfg.sweep.seeds, &mut runs)?;
            row.push(s.mean_metric);
        }
        cells.push(row);
    }
    fs::write(
        cfg.out.join("sweep.csv"),
        sweep_grid_csv(&cfg.sweep.windows, &cfg.sweep.lengths, &cells),
    )?;
    Ok(())
}

fn cmd_kernel(cfg: &RunConfig) -> Result<()> {
    let model: SpadeModel<f64> = match &cfg.eval.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => SpadeModel::new(model_config(cfg))?,
    };
    let layer = model
        .global_placement()
        .first()
        .copied()
        .ok_or_else(|| Error::config("model.placement", "model has no SSM layer"))?;
    let ssm = model.ssm_params(layer).expect("placement lists SSM layers");
    let kernel = ssm.kernel(cfg.task.len)?;
    kernel.write_csv(BufWriter::new(File::create(cfg.out.join("kernel.csv"))?))?;
    println!("wrote {} channels × {} taps", kernel.channels(), kernel.len());
    Ok(())
}
