//! Multi-task flow loss, AdamW, the one-cycle schedule and the training loop.

mod loss;
mod optim;
mod schedule;
mod trainer;

pub use loss::{flow_l1, multitask_l1, FlowTargets, LossVars, Supervision};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::{onecycle_lr, OneCycle};
pub use trainer::{
    batch_gradients, evaluate, load_dataset, train_loop, EpochRecord, LogRecord, LossParts, StepRecord, TrainConfig,
    TrainLog, TrainOutput, TrainSample,
};
