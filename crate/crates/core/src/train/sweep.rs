//! Grids of independent train-and-evaluate runs.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::trainer::{FeatureSource, TrainRunConfig};
use crate::error::{MmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    WeightDecay,
    FeatureSource,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::WeightDecay => "weight_decay",
            SweepAxis::FeatureSource => "feature_source",
        }
    }

    /// The base configuration with this axis set to `value`.
    pub fn apply(self, base: &TrainRunConfig, value: &str) -> Result<TrainRunConfig> {
        let mut run = base.clone();
        match self {
            SweepAxis::WeightDecay => {
                run.weight_decay = value
                    .parse()
                    .map_err(|_| MmtError::Config(format!("weight decay {value:?} is not a number")))?;
            }
            SweepAxis::FeatureSource => run.feature_source = value.parse::<FeatureSource>()?,
        }
        run.validate()?;
        Ok(run)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = MmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight_decay" => Ok(SweepAxis::WeightDecay),
            "feature_source" => Ok(SweepAxis::FeatureSource),
            other => Err(MmtError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub bleu: f64,
    /// Validation loss of the last epoch.
    pub val_loss: f64,
    pub lambda_bar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub result: CellResult,
}

/// Runs `cell` once per value, in order.
pub fn sweep(
    base: &TrainRunConfig,
    axis: SweepAxis,
    values: &[String],
    mut cell: impl FnMut(&TrainRunConfig) -> Result<CellResult>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(MmtError::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let run = axis.apply(base, v)?;
            Ok(SweepRow {
                value: v.clone(),
                result: cell(&run)?,
            })
        })
        .collect()
}

pub fn weight_decay_sweep(
    base: &TrainRunConfig,
    rates: &[f64],
    cell: impl FnMut(&TrainRunConfig) -> Result<CellResult>,
) -> Result<Vec<SweepRow>> {
    let values: Vec<String> = rates.iter().map(|r| r.to_string()).collect();
    sweep(base, SweepAxis::WeightDecay, &values, cell)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{},bleu,val_loss,lambda_bar\n", axis.name());
    for r in rows {
        let lambda = r.result.lambda_bar.map_or_else(String::new, |l| format!("{l:e}"));
        let _ = writeln!(s, "{},{},{:e},{lambda}", r.value, r.result.bleu, r.result.val_loss);
    }
    s
}
