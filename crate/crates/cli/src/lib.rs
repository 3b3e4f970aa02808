//! Experiment driver for the `kronfisher` optimizers: datasets, configs,
//! training runs, Fisher-approximation probes, grid search and CSV/SVG output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod report;

pub use config::{ExperimentConfig, Overrides, Preset};
pub use data::Dataset;
pub use error::{Error, Result};
pub use experiment::{run, run_experiment, run_probe, ProbeOutput, RunOutput, Summary};
pub use grid::{gridsearch, GridResult};
pub use report::{MetricRecord, METRIC_HEADER};
