//! Gate statistics: micro-averaged gating weight and threshold exceedance.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MmtError, Result};
use crate::fusion::GateRecord;

pub const DEFAULT_TAU: f64 = 1e-10;

/// Per-sentence gate totals: enough to recover every corpus statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub sentence_id: String,
    pub epoch: usize,
    pub t: usize,
    pub d: usize,
    pub sum: f64,
    /// Entries strictly above `tau`.
    pub above: usize,
    pub tau: f64,
}

impl GateSummary {
    pub fn of(record: &GateRecord, tau: f64) -> Self {
        Self {
            sentence_id: record.sentence_id.clone(),
            epoch: record.epoch,
            t: record.t,
            d: record.d,
            sum: record.sum(),
            above: record.count_above(tau),
            tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub lambda_bar: f64,
    pub exceed_fraction: f64,
    /// Sentences.
    pub m: usize,
    /// Token rows, summed over sentences.
    pub v: usize,
    pub d: usize,
    pub tau: f64,
    /// Sum of all entries.
    pub sum: f64,
    /// Entries strictly above `tau`.
    pub above: usize,
}

fn check_dims(ds: impl Iterator<Item = usize>) -> Result<usize> {
    let mut dim = None;
    for d in ds {
        if *dim.get_or_insert(d) != d {
            return Err(MmtError::Data("gate records of differing model dimension".into()));
        }
    }
    dim.ok_or_else(|| MmtError::Data("no gate records".into()))
}

/// `Λ̄ = Σ sum(Λ) / (d·V)` with `V = Σ T`, plus the fraction of entries above `tau`.
pub fn micro_avg_gate(records: &[GateRecord], tau: f64) -> Result<GateStats> {
    let d = check_dims(records.iter().map(|r| r.d))?;
    let v: usize = records.iter().map(|r| r.t).sum();
    let sum: f64 = records.iter().flat_map(|r| r.lambda.iter()).sum();
    let above: usize = records.iter().map(|r| r.count_above(tau)).sum();
    let n = (d * v) as f64;
    Ok(GateStats {
        lambda_bar: sum / n,
        exceed_fraction: above as f64 / n,
        m: records.len(),
        v,
        d,
        tau,
        sum,
        above,
    })
}

impl GateStats {
    /// Statistics of the union of disjoint record sets, from their parts.
    pub fn merge(parts: &[GateStats]) -> Result<GateStats> {
        let d = check_dims(parts.iter().map(|p| p.d))?;
        let tau = parts[0].tau;
        if parts.iter().any(|p| p.tau != tau) {
            return Err(MmtError::Data("gate statistics taken at different thresholds".into()));
        }
        let v: usize = parts.iter().map(|p| p.v).sum();
        let sum: f64 = parts.iter().map(|p| p.sum).sum();
        let above: usize = parts.iter().map(|p| p.above).sum();
        let n = (d * v) as f64;
        Ok(GateStats {
            lambda_bar: sum / n,
            exceed_fraction: above as f64 / n,
            m: parts.iter().map(|p| p.m).sum(),
            v,
            d,
            tau,
            sum,
            above,
        })
    }
}

/// Same statistics from summaries (all taken at one `tau`).
pub fn micro_avg_summaries(summaries: &[GateSummary]) -> Result<GateStats> {
    let d = check_dims(summaries.iter().map(|s| s.d))?;
    let tau = summaries[0].tau;
    if summaries.iter().any(|s| s.tau != tau) {
        return Err(MmtError::Data("gate summaries taken at different thresholds".into()));
    }
    let v: usize = summaries.iter().map(|s| s.t).sum();
    let sum: f64 = summaries.iter().map(|s| s.sum).sum();
    let above: usize = summaries.iter().map(|s| s.above).sum();
    let n = (d * v) as f64;
    Ok(GateStats {
        lambda_bar: sum / n,
        exceed_fraction: above as f64 / n,
        m: summaries.len(),
        v,
        d,
        tau,
        sum,
        above,
    })
}

/// One line of a gate log: a full record or its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GateLogLine {
    Full(GateRecord),
    Summary(GateSummary),
}

impl GateLogLine {
    pub fn epoch(&self) -> usize {
        match self {
            GateLogLine::Full(r) => r.epoch,
            GateLogLine::Summary(s) => s.epoch,
        }
    }

    pub fn summary(&self, tau: f64) -> GateSummary {
        match self {
            GateLogLine::Full(r) => GateSummary::of(r, tau),
            GateLogLine::Summary(s) => s.clone(),
        }
    }
}

pub fn write_gate_log(out: &mut impl Write, lines: &[GateLogLine]) -> std::io::Result<()> {
    for l in lines {
        serde_json::to_writer(&mut *out, l)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_gate_log(path: &Path) -> Result<Vec<GateLogLine>> {
    let file = std::fs::File::open(path).map_err(|e| MmtError::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| MmtError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(
            serde_json::from_str(&line)
                .map_err(|e| MmtError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    if lines.is_empty() {
        return Err(MmtError::Data(format!("{}: empty gate log", path.display())));
    }
    Ok(lines)
}

/// Statistics of the lines belonging to each epoch, in epoch order. Full
/// records are evaluated at `tau`; summaries keep their own threshold.
pub fn stats_by_epoch(lines: &[GateLogLine], tau: f64) -> Result<Vec<(usize, GateStats)>> {
    let mut epochs: Vec<usize> = lines.iter().map(GateLogLine::epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    epochs
        .into_iter()
        .map(|e| {
            let s: Vec<GateSummary> = lines.iter().filter(|l| l.epoch() == e).map(|l| l.summary(tau)).collect();
            Ok((e, micro_avg_summaries(&s)?))
        })
        .collect()
}
