//! Experiment configuration, orchestration, and reporting.

pub mod config;
pub mod experiment;
pub mod io;
pub mod report;
pub mod scenarios;

pub use config::{load_config, parse_solver_list, ExperimentConfig, SolverKind};
pub use experiment::{execute, run_experiment, ExperimentOutput};
pub use report::{compare_report, empirical_cdf, percentile, ErrorRecord, ReportRow};
