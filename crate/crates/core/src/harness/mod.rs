//! End-to-end incremental protocol: configuration, training loop, evaluation,
//! reference models and run outputs.

pub mod config;
pub mod learner;
pub mod output;
pub mod run;

pub use crate::metrics::HeadMode;
pub use config::{default_lambda, DatasetSource, ExperimentConfig, ReplayMode};
pub use learner::{
    accuracy, evaluate_all, reference_accuracy, train_reference, Learner, TrainStats,
};
pub use output::{read_checkpoint, summary_table, Checkpoint};
pub use run::{
    compute_references, extend_references, load_stream, run_experiment, run_incremental,
    run_on_stream, HeadReport, IncrementalRun, RunResult, TaskReport, Timing,
};
