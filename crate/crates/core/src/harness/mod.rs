//! Experiment plumbing: configuration, the end-to-end runner, metrics
//! output, evaluation, gradient checks and the command-line front end.

pub mod cli;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;

pub use config::ExperimentConfig;
pub use eval::{evaluate, EvalResult};
pub use experiment::{run_experiment, sweep, ExperimentOutcome, Summary, SweepAxis};
