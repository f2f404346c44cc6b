//! Configuration, phase plans and the training loop.

pub mod config;
pub mod plan;
pub mod run;

pub use config::{Config, DataConfig, GenerationConfig, PhaseConfig, SelectOn};
pub use plan::{lr_at, Ablation, LossTerm, LrSchedule, Phase, TrainPlan};
pub use run::{
    best_checkpoint_path, checkpoint_path, pipeline_phases, run_phase, run_pipeline, Dataset, EpochRecord,
    PipelineOptions, PipelineResult, RunRecord, Teachers,
};
