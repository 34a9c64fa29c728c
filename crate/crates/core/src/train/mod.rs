//! Optimization, splitting, cross-validation, evaluation, and the
//! finite-difference gradient checker.

mod check;
mod optimizer;
mod run;
mod split;

pub use check::{
    fd_max_error, gradient_check, relative_error, BlockCheck, CheckTarget, GradCheckReport,
    FD_STEP, FD_TOLERANCE,
};
pub use optimizer::{Optimizer, OptimizerKind};
pub use run::{
    evaluate, kfold_cross_validate, train_model, EpochStats, EvalReport, FoldOutcome,
    FoldReport, MetricStats, TrainConfig, TrainHistory,
};
pub use split::{
    grouped_kfold, kfold_indices, loaded_keys, record_keys, stratified_split, SplitIndices,
};
