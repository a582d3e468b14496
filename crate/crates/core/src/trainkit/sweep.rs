use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::evaluate;
use super::train::{fit, TrainConfig};
use crate::corpus::DatasetSplit;
use crate::error::{CslsError, Result};
use crate::model::ModelConfig;

/// (p, k_cap) pairs in the order of the reference hyperparameter table.
pub fn default_grid() -> Vec<(usize, usize)> {
    vec![
        (20, 70),
        (20, 100),
        (20, 120),
        (10, 70),
        (10, 100),
        (10, 120),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: usize,
    pub k_cap: usize,
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(
    p: usize,
    k_cap: usize,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &DatasetSplit,
) -> Result<SweepRow> {
    let mut cfg = *base;
    cfg.preprocess.p = p;
    cfg.preprocess.k_cap = k_cap;
    cfg.structure.max_lines = cfg.structure.max_lines.max(k_cap);
    let outcome = fit(cfg, split, train_cfg)?;
    let report = evaluate(
        &outcome.model,
        &split.test,
        train_cfg.threshold,
        train_cfg.batch_size,
    )?;
    Ok(SweepRow {
        p,
        k_cap,
        accuracy: Some(report.accuracy),
        recall: Some(report.recall),
        precision: Some(report.precision),
        f1: Some(report.f1),
        error: None,
    })
}

/// Train and test one model per grid point from the same seed and data.
/// A failing cell is reported in its row and does not stop the sweep.
pub fn sweep(
    grid: &[(usize, usize)],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &DatasetSplit,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CslsError::Empty("sweep grid"));
    }
    Ok(grid
        .iter()
        .map(|&(p, k_cap)| {
            run_cell(p, k_cap, base, train_cfg, split).unwrap_or_else(|e| SweepRow {
                p,
                k_cap,
                accuracy: None,
                recall: None,
                precision: None,
                f1: None,
                error: Some(e.to_string()),
            })
        })
        .collect())
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
