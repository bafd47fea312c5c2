//! Sequential online distillation: optimizers, the training loop,
//! evaluation, checkpoints and metric logs.

pub mod checkpoint;
mod engine;
mod metrics;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointRecord, TrainingState, FORMAT_VERSION, MAGIC};
pub use engine::{
    build_networks, checkpoint_record, evaluate, fit, restore_checkpoint, student_update, teacher_targets,
    teacher_update, train_step_sequential, EarlyStopping, EpochMetrics, EvalResult, FitData, FitOutcome, HeadMetrics,
    HeadTally, NetMetrics, Optimizers, StepStats, TrainConfig,
};
pub use metrics::{metrics_rows, write_metrics_csv, METRICS_HEADER};
pub use optim::{Adam, AdamConfig, OptimizerKind};
