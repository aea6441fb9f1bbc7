//! Experiment harness: configs, end-to-end runs, report comparison and the
//! self-check suites behind the `theseus` binary.

pub mod checks;
pub mod compare;
pub mod config;
pub mod error;
pub mod gramstats;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use run::{run, RunReport};
