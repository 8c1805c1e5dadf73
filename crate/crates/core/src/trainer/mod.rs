//! Optimization, experiment orchestration, checkpoints, metric logging and
//! memory visualization.

mod checkpoint;
mod config;
mod data;
mod optim;
mod run;
mod visual;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{apply_override, LrSchedule, TrainConfig, SEED_ENV};
pub use data::{check_compat, Episode, TaskLayout, MAPPING_INPUT_CHANNELS, QUERY_CHANNELS, TAU};
pub use optim::{
    bce_logits_loss, clip_global_norm, rmsprop_step, RMSPropState, RmsPropConfig, DEFAULT_CLIP,
    DEFAULT_DECAY, DEFAULT_EPS, DEFAULT_LR,
};
pub use run::{
    evaluate, infer, summarize, train, EvalSummary, MetricRow, MetricSummary, RunSummary, Trainer,
    DIVERGED_CHECKPOINT, EVAL_FILE, FINAL_CHECKPOINT, METRICS_FILE,
};
pub use visual::{best_channel_pearson, export_memory_visual, pearson, ChannelSel, MemoryImage};

#[cfg(test)]
mod tests;
