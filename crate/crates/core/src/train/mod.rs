//! Optimizers, learning-rate scheduling and the training loop.

mod optim;
mod sched;
mod trainer;

pub use optim::{
    adamw_step, clip_grad_norm, grad_norm, sophia_update_hessian, sophiag_step, AdamWConfig, OptimizerKind,
    OptimizerState, SophiaConfig,
};
pub use sched::PlateauScheduler;
pub use trainer::{evaluate, translate_all, DevScores, EpochRecord, StepReport, TrainConfig, Trainer};
