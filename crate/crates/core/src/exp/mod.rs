//! Experiment harness behind the `ndlab` command line.

pub mod config;
pub mod gradsuite;
pub mod plot;
pub mod protocols;
pub mod runner;

pub use config::ExperimentConfig;
