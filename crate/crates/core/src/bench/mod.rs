//! Experiment harness behind the `lozo` binary: config parsing, runs with
//! CSV/JSON output, algorithm comparisons and the verification suite.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod verify;

pub use compare::{compare_algorithms, CompareEntry, CompareOptions, ComparisonRow};
pub use config::{parse_config, ConfigOverrides, ExperimentConfig};
pub use experiment::{run_experiment, Summary};
pub use verify::{verify_suite, Level, VerifyReport};
