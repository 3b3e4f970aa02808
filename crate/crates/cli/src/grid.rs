//! Grid search: one training run per hyperparameter combination, keeping
//! for each method the setting with the lowest final training loss.

use std::path::Path;

use kronfisher::OptimizerKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GridConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experiment::{run, RunOutput};
use crate::report::{emit_plot, emit_records, EpochRecord, Series};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub method: OptimizerKind,
    pub learning_rate: f64,
    /// NaN for first-order methods.
    pub damping: f64,
    /// NaN for first-order methods.
    pub clip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: OptimizerKind,
    pub learning_rate: f64,
    pub damping: f64,
    pub clip: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub diverged: bool,
    pub best: bool,
}

pub const GRID_HEADER: [&str; 8] = [
    "method",
    "learning_rate",
    "damping",
    "clip",
    "initial_train_loss",
    "final_train_loss",
    "diverged",
    "best",
];

/// Every combination of the grid, in a fixed order.
pub fn grid_points(grid: &GridConfig) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &method in &grid.methods {
        for &learning_rate in &grid.learning_rates {
            if method.method().is_none() {
                out.push(GridPoint {
                    method,
                    learning_rate,
                    damping: f64::NAN,
                    clip: f64::NAN,
                });
                continue;
            }
            for &damping in &grid.dampings {
                for &clip in &grid.clips {
                    out.push(GridPoint {
                        method,
                        learning_rate,
                        damping,
                        clip,
                    });
                }
            }
        }
    }
    out
}

/// `base` with the optimizer settings of `p`.
pub fn configure(base: &ExperimentConfig, p: &GridPoint) -> ExperimentConfig {
    let mut c = base.clone();
    c.optimizer.method = p.method;
    c.optimizer.learning_rate = p.learning_rate;
    if p.method.method().is_some() {
        c.optimizer.damping = p.damping;
        c.optimizer.clip = p.clip;
    }
    if let Some(probe) = &mut c.probe {
        probe.during_training = false;
    }
    c
}

#[derive(Debug, Clone)]
pub struct MethodBest {
    pub point: GridPoint,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: Vec<MethodBest>,
}

impl GridResult {
    pub fn best_for(&self, method: OptimizerKind) -> Option<&MethodBest> {
        self.best.iter().find(|b| b.point.method == method)
    }
}

/// Runs the whole grid in parallel. Runs are independent and individually
/// deterministic, so the result does not depend on scheduling.
pub fn gridsearch(base: &ExperimentConfig, grid: &GridConfig, data: &Dataset) -> Result<GridResult> {
    let points = grid_points(grid);
    if points.is_empty() {
        return Err(Error::Config("grid has no points".into()));
    }
    let outputs: Vec<RunOutput> = points
        .par_iter()
        .map(|p| run(&configure(base, p), data))
        .collect::<Result<_>>()?;

    let mut rows: Vec<GridRow> = points
        .iter()
        .zip(&outputs)
        .map(|(p, o)| GridRow {
            method: p.method,
            learning_rate: p.learning_rate,
            damping: p.damping,
            clip: p.clip,
            initial_train_loss: o.summary.initial_train_loss,
            final_train_loss: o.summary.final_train_loss,
            diverged: o.summary.diverged,
            best: false,
        })
        .collect();
    let mut best = Vec::new();
    for &method in &grid.methods {
        let winner = (0..rows.len())
            .filter(|&i| rows[i].method == method)
            .min_by(|&a, &b| rows[a].final_train_loss.total_cmp(&rows[b].final_train_loss));
        if let Some(i) = winner {
            rows[i].best = true;
            best.push(MethodBest {
                point: points[i],
                epochs: outputs[i].epochs.clone(),
            });
        }
    }
    Ok(GridResult { rows, best })
}

/// Writes `grid.csv` and `grid.svg` (training loss of each method's best setting).
pub fn write_grid(result: &GridResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    emit_records(&result.rows, &GRID_HEADER, &dir.join("grid.csv"))?;
    let series: Vec<Series> = result
        .best
        .iter()
        .map(|b| Series {
            label: b.point.method.name().into(),
            points: b.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
        })
        .collect();
    emit_plot(&series, "best training loss per method", "epoch", "training loss", &dir.join("grid.svg"))
}
