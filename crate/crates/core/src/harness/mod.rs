//! Experiment harness: configuration, sweeps and result emission.

pub mod config;
pub mod io;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, Grid};
pub use report::{emit_curves, emit_table, format_cell, mean_sd, MetricsRow, SummaryRow, Table};
pub use sweep::{run_experiment, write_outputs, ExperimentResult, MethodResult};
