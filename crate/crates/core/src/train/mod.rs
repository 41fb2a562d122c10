//! Optimizer, schedules and the pretraining and finetuning loops.

mod adafactor;
mod finetune;
mod pretrain;
mod schedule;

pub use adafactor::{Adafactor, AdafactorConfig};
pub use finetune::{finetune, finetune_seed, step_plan, EvalRecord, FinetuneConfig, FinetuneOutcome, SeedRun, TaskSplits};
pub use pretrain::{accumulate_and_step, accumulate_gradients, pretrain, smoothed, PretrainOutcome, Pretrainer, StepRecord};
pub use schedule::{linear_decay_lr, stop_point, EarlyStopDecision, EarlyStopState, PretrainSchedule};
