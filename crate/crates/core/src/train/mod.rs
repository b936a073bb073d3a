//! Training, evaluation, checkpoints and interaction analysis.

mod checkpoint;
mod config;
mod interaction;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{OptimizerConfig, Overrides, TrainConfig, FINETUNE_LAMBDA, PRETRAIN_LAMBDA};
pub use interaction::{
    export_matrix, interaction_matrix, matrix_from_csv, matrix_to_csv, matrix_to_pgm, InteractionAccumulator,
    InteractionMatrix, MatrixFormat,
};
pub use trainer::{
    evaluate_model, format_eval, load_network, prepare_data, read_metrics, train, EpochMetrics, EvalMetrics,
    RunSummary, EVAL_BATCH, METRICS_HEADER,
};

use crate::arch::{count_flops, CostReport};
use crate::error::Result;

/// Parameter and FLOP report of the configured architecture (with its own
/// head size) at a square input size.
pub fn cost_report(cfg: &TrainConfig, input: usize) -> Result<CostReport> {
    count_flops(&cfg.descriptor()?, input)
}
