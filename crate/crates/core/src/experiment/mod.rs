//! Experiment orchestration: TOML configuration, training runs with the
//! precision schedule, hyperparameter sweeps, solver calibration, and
//! CSV/JSON outputs.

pub mod calibrate;
pub mod config;
pub mod metrics;
pub mod solve;
pub mod sweep;
pub mod train;

pub use calibrate::{calibrate, run_calibrate, CalibrationReport};
pub use config::{ExperimentConfig, OptimizerKind};
pub use metrics::{emit_metrics, RunSummary, METRICS_HEADER};
pub use solve::{parse_matrix_text, run_solve, solve_system, SolveReport};
pub use sweep::{sweep, SweepResult};
pub use train::{load_datasets, run_training, train, Datasets, TrainOptions, TrainRecord};
