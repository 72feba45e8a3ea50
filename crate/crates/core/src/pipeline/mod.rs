//! Training orchestration: optimizer, stage plans, variant runs, base
//! pretraining, checkpoints and evaluation dumps.

mod base;
mod optimizer;
mod plan;
mod run;
mod train;

pub use base::{noise_contexts, pretrain_base, BaseSpec, PretrainConfig};
pub use optimizer::{Adam, AdamConfig, ParamStore};
pub use plan::{Objective, RunKind, StagePlan, TrainConfig, TrainPlan};
pub use run::{
    config_hash, generate_eval_dump, quantize_train_levels, resolve_choice, run_dir, run_variant, validation_prompts, AdapterSpec,
    RunManifest, RunRecord, RunSpec,
};
pub use train::{optimize, shuffle_rng, StageInput, StageSummary, TraceRow};
