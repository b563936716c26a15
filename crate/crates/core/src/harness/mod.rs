//! Experiment orchestration: configuration, the pipeline stages, metrics,
//! budget and strength sweeps, and report files.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod sweep;

pub use config::{BudgetConfig, DatasetConfig, ExperimentConfig};
pub use metrics::{evaluate, median, metrics_csv, CellCounts, EvalCell, Evaluation, Group, LabelOrigin, MetricsRow};
pub use pipeline::{prepare, train_cell, Prepared, Systems, TrainedCell, TrainingAudit};
pub use sweep::{
    budget_sweep, run_config, run_experiment, strength_sweep, write, write_cell, write_sweep, GainRow, StrengthReport, SweepReport,
    Timings,
};
