//! Tasks, optimizer and the training / evaluation loop.

pub mod optim;
pub mod tasks;
mod trainer;

pub use optim::{clip_global_norm, global_norm, lr_at, Adam, AdamConfig};
pub use tasks::{
    gen_copy, gen_long_range_recall, load_char_corpus, recall_split, CharCorpus, Example, Split, Task, TaskKind,
    TaskSpec, FILLER,
};
pub use trainer::{argmax, evaluate, train, EvalResult, Metric, MetricsRecord, TrainConfig, TrainOutcome};
