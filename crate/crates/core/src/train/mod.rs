//! Optimization, evaluation, ablations and multi-probe evaluation.

mod ablation;
mod config;
mod eval;
mod fit;
mod multitask;
mod optim;

pub use ablation::{ablation_preset, format_ablation_table, run_ablation, AblationOutcome, AblationRow, ABLATION_PRESETS};
pub use config::{LrSchedule, Optimizer, TrainConfig};
pub use eval::{argmax, evaluate, format_drop, predict, sensitivity_analysis, Confusion, CorruptionResult, EvalReport};
pub use fit::{train, EpochRecord, TrainHistory};
pub use multitask::{multi_task_evaluate, CostAccounting, DiskFeatures, FeatureSource, MultiTaskReport, MultiTaskSpec, TaskSpec};
pub use optim::{adam_update, clip_grad_norm, optimizer_step, OptimState};
