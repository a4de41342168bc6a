//! Scenario runner behind the `vudlmp` binary.
//!
//! A scenario names a network file, an unbalance treatment and an output
//! directory. [`scenario::run_scenario`] solves it and writes
//! `summary.csv`, the price tables, the sensitivity report and plot data;
//! [`scenario::run_sweep`] repeats that over a list of penalty weights or
//! VUF limits.

pub mod config;
pub mod report;
pub mod scenario;

pub use config::{ConfigError, Reports, ScenarioConfig, SweepSpec};
pub use scenario::{run_scenario, run_sweep, RunStatus, ScenarioError, ScenarioResult};
