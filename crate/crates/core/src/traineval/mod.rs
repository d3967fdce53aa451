//! Synthetic data, training and caption evaluation.

pub mod data;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod train;

pub use data::{generate_synthetic, Dataset, Sample, SyntheticTaskSpec};
pub use eval::{evaluate, mismatch_sweep, Evaluation, GateSplit, MetricRow, SweepRow, EVAL_SEED};
pub use metrics::{bleu_n, corpus_bleu, rouge_l, Scores};
pub use optim::{Adam, AdamConfig};
pub use train::{cross_entropy, train, EpochStats, TrainConfig, TrainReport};
