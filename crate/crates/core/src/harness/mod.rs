//! Experiment orchestration: configuration, seeded runners for the five
//! pipeline stages (prepare, train, eval, ablate, verify), metrics, and
//! CSV output.

pub mod config;
pub mod metrics;
pub mod run;

pub use config::{ExperimentConfig, DEFAULT_CONFIG};
pub use metrics::MetricsRecord;
pub use run::{
    evaluate_source, prepare_tasks, run_ablation, run_eval, run_prepare, run_train, run_verify,
    train_denoiser, AblationOutcome, EvalOutcome, PrepareOutcome, PreparedTask, PreparedTasks,
    TrainOutcome, VerifyReport, VerifyRow, WeightSource,
};
