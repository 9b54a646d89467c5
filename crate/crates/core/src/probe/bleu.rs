use std::collections::HashMap;

use serde::Serialize;

use crate::error::{MmtError, Result};

/// Corpus-level BLEU-4 with clipped n-gram counts and no smoothing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn summary(&self) -> String {
        format!(
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3}, hyp_len = {}, ref_len = {})",
            self.bleu,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }

    pub const CSV_HEADER: &'static str = "bleu,p1,p2,p3,p4,bp,hyp_len,ref_len";

    pub fn csv_row(&self) -> String {
        let p = self.precisions;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.bleu, p[0], p[1], p[2], p[3], self.brevity_penalty, self.hyp_len, self.ref_len
        )
    }
}

fn ngrams<'t, 's>(tokens: &'t [&'s str], n: usize) -> HashMap<&'t [&'s str], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Scores whitespace-tokenized hypothesis strings against one reference each.
pub fn bleu4<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(MmtError::Data(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(MmtError::Data("BLEU needs at least one sentence pair".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(&r, n);
            for (g, c) in ngrams(&h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}
