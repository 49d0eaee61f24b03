//! Optimizer, schedules, training loops, experiment configuration and
//! metrics output.

pub mod checks;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod run;
pub mod schedule;
pub mod train;

pub use config::{ExperimentConfig, Mode};
pub use metrics::{MetricsRecord, METRICS_FILE, TIMING_FILE};
pub use run::{run_experiment, Summary};
pub use schedule::{sgd_step, SgdState, TrainingSchedule};
pub use train::{
    accuracy, distill, evaluate, finetune_linear, train_supervised, transfer_distill, DistillOptions, DistillOutcome,
    Distiller, RunOptions,
};
