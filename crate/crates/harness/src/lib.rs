//! Experiment runner for draft-model distillation studies: builds seeded
//! simulated worlds, trains drafts per scenario and method, measures token
//! acceptance under speculative decoding and evaluates trend verdicts.

pub mod config;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod runner;
pub mod suites;

pub use config::{ExperimentConfig, Method, Scenario, WorldConfig};
pub use error::{HarnessError, Result};
pub use lab::Lab;
pub use metrics::{emit, Axis, Format, MetricsRecord};
pub use runner::{run, run_all, sweep, train_draft, AxisValue, RunOptions};
pub use suites::{reproduce, reproduce_in, Suite, SuiteReport, Verdict};
