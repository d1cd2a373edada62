//! Toy-scale training: schedule, synthetic data, SGD loop, QK-norm ablation.

pub mod ablation;
pub mod schedule;
pub mod task;
pub mod train;

pub use ablation::{ablate_qk_norm, prescale_qk, AblationArm};
pub use schedule::Schedule;
pub use task::SyntheticTask;
pub use train::{
    sgd_update, train, train_with_lr, weight_decay_groups, Execution, RunStatus, StepRecord, Telemetry, TrainConfig,
    TrainOutcome, TELEMETRY_HEADER,
};
