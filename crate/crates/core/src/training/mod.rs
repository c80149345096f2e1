//! Joint multitask optimization, pretraining, parameter transfer and
//! checkpoints.

mod checkpoint;
mod config;
mod optim;
mod trainer;
mod transfer;

pub use checkpoint::{Checkpoint, OptimizerState, RngState};
pub use config::TrainConfig;
pub use optim::{clip_global_norm, Adam};
pub use trainer::{
    batch_objective, dev_error_rate, dev_loss, evaluate_dev, objective_gradients, objective_value, pretrain_asr,
    train_from, train_multitask, write_metrics_csv, DevReport, StepMetrics, TrainOutcome, TrainState, DEV_BATCH,
    METRICS_HEADER,
};
pub use transfer::transfer;
