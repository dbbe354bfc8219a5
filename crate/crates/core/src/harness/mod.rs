//! Synthetic data, run configuration, training, evaluation and benchmarks.

mod config;
mod data;
mod eval;
mod train;

pub use config::RunConfig;
pub use data::{class_histogram, glyph_mask, make_dataset, Dataset, DatasetSpec, Sample, GLYPH_NAMES};
pub use eval::{bench, evaluate, evaluate_checkpoint, infer_one, BenchReport, EvalReport, LatencyStats};
pub use train::{cosine_lr, read_metrics, train, train_on, MetricsRecord, TrainOutcome};
