//! Probing, scoring and sweeps over finished runs.

use std::fmt::Write as _;
use std::path::Path;

use mmt_core::data::Split;
use mmt_core::probe::gate::{read_gate_log, stats_by_epoch, GateLogLine};
use mmt_core::probe::{bleu4, BleuReport, GateStats};
use mmt_core::train::sweep::{sweep, sweep_csv, CellResult, SweepAxis, SweepRow};
use mmt_core::{MmtError, Result};

use crate::config::ExperimentConfig;
use crate::prepare::{read_text, write_file};
use crate::run::cmd_train;

pub const PROBE_HEADER: &str = "split,epoch,lambda_bar,exceed_fraction,tau";

/// Gate statistics of one split at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub split: String,
    pub epoch: usize,
    pub stats: GateStats,
}

fn split_of(line: &GateLogLine) -> String {
    let id = match line {
        GateLogLine::Full(r) => &r.sentence_id,
        GateLogLine::Summary(s) => &s.sentence_id,
    };
    id.rsplit_once('-').map_or_else(|| "all".to_string(), |(s, _)| s.to_string())
}

/// Reads a gate log (or `gates.jsonl` inside a run directory) and returns
/// Λ̄ and the exceedance fraction per split and epoch.
pub fn cmd_probe(path: &Path, tau: f64) -> Result<Vec<ProbeRow>> {
    let file = if path.is_dir() { path.join("gates.jsonl") } else { path.to_path_buf() };
    let lines = read_gate_log(&file)?;
    let mut splits: Vec<String> = lines.iter().map(split_of).collect();
    splits.sort_by_key(|s| {
        let order = Split::ALL.iter().position(|x| x.name() == s).unwrap_or(Split::ALL.len());
        (order, s.clone())
    });
    splits.dedup();
    let mut rows = Vec::new();
    for split in splits {
        let part: Vec<GateLogLine> = lines.iter().filter(|l| split_of(l) == split).cloned().collect();
        for (epoch, stats) in stats_by_epoch(&part, tau)? {
            rows.push(ProbeRow {
                split: split.clone(),
                epoch,
                stats,
            });
        }
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = format!("{PROBE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e}",
            r.split, r.epoch, r.stats.lambda_bar, r.stats.exceed_fraction, r.stats.tau
        );
    }
    s
}

/// Corpus BLEU of a hypothesis file against a reference file.
pub fn cmd_bleu(hyp: &Path, reference: &Path) -> Result<BleuReport> {
    let h = read_text(hyp)?;
    let r = read_text(reference)?;
    let h: Vec<&str> = h.lines().collect();
    let r: Vec<&str> = r.lines().collect();
    bleu4(&h, &r)
}

/// Trains one cell per value under `out/<axis>=<value>` and writes
/// `out/sweep.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], out: &Path, progress: bool) -> Result<Vec<SweepRow>> {
    let base = cfg.run_config();
    let mut cell_index = 0;
    let rows = sweep(&base, axis, values, |run| {
        let cell_cfg = cfg.with_run(run);
        let dir = out.join(format!("{}={}", axis.name(), values[cell_index]));
        cell_index += 1;
        if progress {
            eprintln!("sweep cell {}", dir.display());
        }
        let report = cmd_train(&cell_cfg, &dir, progress)?;
        let last = report
            .history
            .last()
            .ok_or_else(|| MmtError::Data("training produced no epochs".into()))?;
        Ok(CellResult {
            bleu: report.test_bleu.bleu,
            val_loss: last.val_loss,
            lambda_bar: report.final_gate.map(|g| g.lambda_bar),
        })
    })?;
    write_file(&out.join("sweep.csv"), sweep_csv(axis, &rows))?;
    Ok(rows)
}
