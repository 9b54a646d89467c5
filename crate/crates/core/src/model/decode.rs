//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use mmt_autodiff::{Real, Tensor};

use super::transformer::{Seq2Seq, SeqBatch, VisualBatch};
use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{MmtError, Result};
use crate::fusion::GateMode;

/// Supplies next-token log-probabilities for a set of equal-length prefixes.
pub trait LogitSource {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;

    fn eos(&self) -> usize {
        EOS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeHypothesis {
    /// Generated tokens, end-of-sequence excluded.
    pub tokens: Vec<usize>,
    /// Sum of the per-step log-probabilities, end-of-sequence step included.
    pub log_prob: f64,
    pub finished: bool,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Appends the argmax token until end-of-sequence or `max_len` tokens.
pub fn greedy_decode(source: &impl LogitSource, max_len: usize) -> Result<Vec<usize>> {
    let mut prefix = Vec::new();
    while prefix.len() < max_len {
        let lp = source.next_log_probs(std::slice::from_ref(&prefix))?;
        let tok = argmax(&lp[0]);
        if tok == source.eos() {
            break;
        }
        prefix.push(tok);
    }
    Ok(prefix)
}

struct Candidate {
    score: f64,
    step: f64,
    parent: usize,
    token: usize,
}

/// Beam search ranked by summed log-probability with no length penalty.
///
/// Candidates are ordered by total score, then by the step log-probability,
/// then by creation order (parent rank, token id). Hypotheses still open at
/// `max_len` are closed as truncated. The search stops early once the best
/// finished score is at least the best open score, since open scores can only
/// decrease.
pub fn beam_search(source: &impl LogitSource, beam: usize, max_len: usize) -> Result<DecodeHypothesis> {
    if beam == 0 {
        return Err(MmtError::Config("beam size must be at least 1".into()));
    }
    let eos = source.eos();
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<DecodeHypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(t, _)| t.clone()).collect();
        let lps = source.next_log_probs(&prefixes)?;
        let mut cands = Vec::new();
        for (parent, ((_, score), lp)) in alive.iter().zip(&lps).enumerate() {
            for (token, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push(Candidate {
                        score: score + l,
                        step: l,
                        parent,
                        token,
                    });
                }
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(b.step.total_cmp(&a.step))
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        let mut next = Vec::new();
        for c in cands.into_iter().take(beam) {
            let mut tokens = alive[c.parent].0.clone();
            if c.token == eos {
                finished.push(DecodeHypothesis {
                    tokens,
                    log_prob: c.score,
                    finished: true,
                });
            } else {
                tokens.push(c.token);
                next.push((tokens, c.score));
            }
        }
        alive = next;
        if step + 1 == max_len {
            break;
        }
        let best_open = alive.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || best_done >= best_open {
            break;
        }
    }
    finished.extend(alive.into_iter().map(|(tokens, log_prob)| DecodeHypothesis {
        tokens,
        log_prob,
        finished: false,
    }));
    // Stable: among equal scores the earliest closed hypothesis wins.
    let best = finished
        .into_iter()
        .reduce(|best, h| match h.log_prob.partial_cmp(&best.log_prob) {
            Some(Ordering::Greater) => h,
            _ => best,
        })
        .unwrap_or(DecodeHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        });
    Ok(best)
}

pub fn beam_decode(source: &impl LogitSource, beam: usize, max_len: usize) -> Result<Vec<usize>> {
    Ok(beam_search(source, beam, max_len)?.tokens)
}

/// Log-softmax in 64-bit, shared by every scorer.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Scores prefixes with a trained model against one source sentence. The
/// encoder and fusion run once; the decoder is recomputed per step.
pub struct ModelScorer<'m, T: Real> {
    model: &'m Seq2Seq<T>,
    memory: Tensor<T>,
    src_len: usize,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m Seq2Seq<T>, source: &[usize], visual: Option<&VisualBatch<T>>) -> Result<Self> {
        let src = SeqBatch::single(source)?;
        let (memory, _) = model.memory(&src, visual, GateMode::Learned)?;
        Ok(Self {
            model,
            memory,
            src_len: source.len(),
        })
    }
}

impl<T: Real> LogitSource for ModelScorer<'_, T> {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let b = prefixes.len();
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let tgt = SeqBatch::from_seqs(&inputs)?;
        let d = self.memory.cols();
        let mut mem = Vec::with_capacity(b * self.memory.numel());
        for _ in 0..b {
            mem.extend_from_slice(self.memory.data());
        }
        let memory = Tensor::new(vec![b * self.src_len, d], mem)?;
        let src = SeqBatch {
            ids: vec![PAD; b * self.src_len],
            batch: b,
            len: self.src_len,
            lens: vec![self.src_len; b],
        };
        let logits = self.model.logits_from_memory(&memory, &src, &tgt)?;
        Ok((0..b)
            .map(|i| {
                let row: Vec<f64> = logits.row(i * tgt.len + tgt.lens[i] - 1).iter().map(|x| x.as_f64()).collect();
                let mut lp = log_softmax(&row);
                lp[PAD] = f64::NEG_INFINITY;
                lp[BOS] = f64::NEG_INFINITY;
                lp
            })
            .collect())
    }
}
