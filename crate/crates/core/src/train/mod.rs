//! Optimizer, schedules, the two training stages, evaluation and the gradient-check suite.

mod config;
mod eval;
mod gradcheck;
mod loops;
mod optim;
mod pipeline;

pub use config::TrainConfig;
pub use eval::{evaluate, predict, EvalConfig, InputMode, Prediction};
pub use gradcheck::{
    check_store, run_gradcheck_suite, GradCheckEntry, GRADCHECK_EPSILON, MODEL_TOLERANCE, UNIT_TOLERANCE,
};
pub use loops::{
    batch_indices, trace_csv, train_full, train_posenet, write_trace_csv, TraceRow, TrainOutcome, TRACE_HEADER,
};
pub use optim::{lr_at, rmsprop_step, RmspropState, RMSPROP_ALPHA, RMSPROP_EPS};
pub use pipeline::{
    assemble_batch, forward_batch, full_objective, pose_objective, Batch, Forward, LossValues, MeshContext, PoseSource,
};
