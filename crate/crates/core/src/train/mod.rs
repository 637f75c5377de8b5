//! Optimization, evaluation and gradient verification.

mod config;
mod evaluate;
mod gradcheck;
mod objective;
mod optim;
mod run;
mod trainer;

pub use config::{lr_at, RoutingMode, TrainConfig};
pub use evaluate::{
    evaluate, evaluate_with, fit_metrics, image_metrics, patch_mae, EvalReport, FitMetrics,
    ImageEval,
};
pub use gradcheck::{grad_check, gradcheck_batch, GradCheckOptions, GradCheckReport, GroupReport};
pub use objective::{batch_loss, BatchLoss, Objective};
pub use optim::{clip_grad_norm, Sgd, VELOCITY_PREFIX};
pub use run::{run_training, DataConfig, RunConfig, SyntheticData};
pub use trainer::{prepare, split_indices, train, EpochRecord, Prepared, TrainReport, Trainer};
