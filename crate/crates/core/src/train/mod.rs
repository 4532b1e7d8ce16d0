//! AdamW, the warmup-cosine schedule, the training loop, checkpoints and
//! ablation runs.

mod ablation;
mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use ablation::{
    run_ablation, variant_params, write_ablation_csv, AblationMatrix, AblationRow, Variant, ABLATION_HEADER,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::cosine_lr;
pub use trainer::{
    argmax, checkpoint_path, evaluate, train, train_with, write_metrics, EpochMetrics, Evaluation,
    TrainConfig, TrainRun, DEFAULT_WARMUP_FRACTION, METRICS_HEADER, REFERENCE_BATCH,
};
