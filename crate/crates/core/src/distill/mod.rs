//! Loss family and training pipelines for knowledge distillation.

mod layer_map;
mod losses;
mod plan;
mod train;

pub use layer_map::{uniform_layer_map, LayerMap};
pub use losses::{
    attention_targets, combine_loss, hard_loss, intermediate_losses, pair_mask, row_mask, soft_loss, soft_targets,
    Component, KDHyper, LossBreakdown, LossInputs, Objective, ProjectionSet,
};
pub use plan::{
    DistillMode, DistillPlan, FinetunePlan, StagePlan, StageSettings, DESK_BATCH_DIVISOR, DESK_LEARNING_RATE,
};
pub use train::{
    epoch_order, evaluate_objective, finetune, format_log, pair_loss, run_distillation, Distiller, LogRecord,
    LossVars, ProjectionVars, StageOutcome, TeacherTargets, TrainOutcome, Validator,
};
