//! Evaluation and interpretability arithmetic.

pub mod bleu;
pub mod gate;

pub use bleu::{bleu4, BleuReport};
pub use gate::{micro_avg_gate, micro_avg_summaries, GateLogLine, GateStats, GateSummary, DEFAULT_TAU};

use std::fmt::Write;

use crate::error::{MmtError, Result};
use crate::train::checkpoint::Checkpoint;

/// `√(Σ x²)` over the parameters whose name contains `filter` (all when empty).
pub fn weight_l2_norm(ckpt: &Checkpoint, filter: &str) -> Result<f64> {
    let selected: Vec<_> = ckpt.params.iter().filter(|(n, _)| n.contains(filter)).collect();
    if selected.is_empty() {
        return Err(MmtError::Data(format!("no parameter matches {filter:?}")));
    }
    Ok(selected.iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Absent for text-only models.
    pub gate: Option<GateStats>,
    /// Learning rate at the last update of the epoch.
    pub lr: f64,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:e}"))
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lambda_bar,lr";
pub const DYNAMICS_HEADER: &str = "epoch,lambda_bar,exceed_fraction,val_loss";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{:e}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            opt(r.gate.map(|g| g.lambda_bar)),
            r.lr
        );
    }
    s
}

/// Gate dynamics curve: one row per epoch.
pub fn emit_dynamics_csv(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(MmtError::Data("no epochs to emit".into()));
    }
    let mut s = format!("{DYNAMICS_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{:e}",
            r.epoch,
            opt(r.gate.map(|g| g.lambda_bar)),
            opt(r.gate.map(|g| g.exceed_fraction)),
            r.val_loss
        );
    }
    Ok(s)
}
