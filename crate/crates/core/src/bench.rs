//! Search-cost comparison between the decoupled and mixed spaces.

use std::fmt::Write as _;

use serde::Serialize;
use stnas_autodiff::Tensor;

use crate::arch::SearchMode;
use crate::data::DatasetSplits;
use crate::error::{Result, StnasError};
use crate::model::ModelConfig;
use crate::search::{run_search, SearchConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: SearchMode,
    pub epochs: usize,
    pub secs_per_epoch: f64,
    /// Largest autodiff tape of any step.
    pub peak_tape_bytes: usize,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, mode: SearchMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,epochs,secs_per_epoch,peak_tape_bytes,val_mae\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{},{}",
                r.mode, r.epochs, r.secs_per_epoch, r.peak_tape_bytes, r.val_mae
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>6} {:>12} {:>14} {:>10}\n",
            "mode", "epochs", "s/epoch", "peak tape MB", "val MAE"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>12.3} {:>14.2} {:>10.4}",
                r.mode.to_string(),
                r.epochs,
                r.secs_per_epoch,
                r.peak_tape_bytes as f64 / 1e6,
                r.val_mae
            );
        }
        s
    }
}

/// Runs the same search budget once per mode and records its cost.
pub fn benchmark_search(
    config: &ModelConfig,
    splits: &DatasetSplits,
    adjacency: Option<&Tensor>,
    search: &SearchConfig,
    modes: &[SearchMode],
) -> Result<BenchReport> {
    if search.epochs == 0 {
        return Err(StnasError::Model("benchmark needs at least one search epoch".into()));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut cfg = config.clone();
        cfg.mode = mode;
        let out = run_search(cfg, splits, adjacency.cloned(), search)?;
        rows.push(BenchRow {
            mode,
            epochs: out.log.len(),
            secs_per_epoch: out.mean_epoch_seconds(),
            peak_tape_bytes: out.state.peak_tape_bytes,
            val_mae: out.val_mae(splits, search.batch_size)?,
        });
    }
    Ok(BenchReport { rows })
}
