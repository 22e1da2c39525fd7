//! Training: the optimizer with its schedules, one step at a time, and the
//! incremental sequence driver on top.

mod engine;
mod optim;
mod schedule;
mod sequence;

pub use engine::{train_joint, train_task, EpochRecord, StepConfig, TrainLog};
pub use optim::{sgd_momentum_step, Sgd};
pub use schedule::{cosine_annealing_lr, LrSchedule};
pub use sequence::{
    run_incremental_sequence, train_joint_baseline, JointOutcome, PlanStep, SequencePlan, StepOutcome,
};
