use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::{NormStats, SplitKind, Splits};
use crate::error::Result;
use crate::forecast::EvalMetrics;
use crate::mae::MaskAxis;
use crate::scalar::Precision;

/// Number of leading step losses copied into reports.
pub const FIRST_LOSSES: usize = 5;

/// Where and with what a run was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub precision: Precision,
    pub threads: usize,
}

impl Environment {
    pub fn capture(precision: Precision) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            precision,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub hash: String,
    pub t_total: usize,
    pub n_nodes: usize,
    pub channels: usize,
    pub splits: Splits,
    pub norm: Option<NormStats>,
    pub mirage_pairs: usize,
}

/// One optimisation phase. The full curve lives in `loss_csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub steps: usize,
    pub epochs: usize,
    pub first_losses: Vec<f64>,
    pub final_loss: f64,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
    /// Paths are relative to the run directory.
    pub loss_csv: String,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetInfo,
    pub phases: Vec<PhaseReport>,
    pub notice: Option<String>,
    pub timings: BTreeMap<String, f64>,
    pub environment: Environment,
}

/// Error on the forecasting samples whose input lies in a planted mirage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirageMetrics {
    pub samples: usize,
    pub mae: f64,
    pub raw_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: SplitKind,
    pub samples: usize,
    pub metrics: EvalMetrics,
    pub mirage: Option<MirageMetrics>,
    pub predictions: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRunReport {
    /// `augmented` or `baseline`.
    pub name: String,
    pub branches: Vec<MaskAxis>,
    pub phase: PhaseReport,
    pub splits: Vec<SplitReport>,
}

impl ForecastRunReport {
    pub fn split(&self, kind: SplitKind) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == kind)
    }
}

/// Augmented against baseline on the validation split (normalized units).
/// Positive improvements mean the augmented model is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub augmented_mae: f64,
    pub baseline_mae: f64,
    pub mae_improvement: f64,
    pub augmented_mirage_mae: Option<f64>,
    pub baseline_mirage_mae: Option<f64>,
    pub mirage_improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub dataset: DatasetInfo,
    pub pretrain: Vec<PhaseReport>,
    pub runs: Vec<ForecastRunReport>,
    pub comparison: Option<Comparison>,
    pub notices: Vec<String>,
    /// Wall-clock seconds per phase; the only field that varies between
    /// identical runs.
    pub timings: BTreeMap<String, f64>,
    pub environment: Environment,
}

impl RunReport {
    pub fn run(&self, name: &str) -> Option<&ForecastRunReport> {
        self.runs.iter().find(|r| r.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset_hash: String,
    pub split: SplitKind,
    /// Set when the training split was evaluated.
    pub train_split: bool,
    pub warning: Option<String>,
    pub samples: usize,
    pub metrics: EvalMetrics,
    pub mirage: Option<MirageMetrics>,
    pub per_sample_csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_ratio: f64,
    pub val_mae: f64,
    pub test_mae: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_mape: Option<f64>,
    pub val_mirage_mae: Option<f64>,
    pub run_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub baseline_val_mae: Option<f64>,
    pub table: String,
}

/// Artifacts written by `report`, plus those that could not be built.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub written: Vec<String>,
    pub missing: Vec<String>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
