//! Experiment orchestration behind the `drafteu` binary.

pub mod config;
pub mod experiment;
pub mod report;
pub mod studies;
pub mod theory;

pub use config::ExperimentConfig;
pub use experiment::run_experiment;
pub use report::{emit_report, ReportFormat};
pub use theory::{verify_theory, TheoryCheckResult};
