use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{BOS, EOS, PAD};
use crate::error::{MmtError, Result};
use crate::model::SeqBatch;

/// Token ids of one pair; both sides end with end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl EncodedPair {
    pub fn new(mut source: Vec<usize>, mut target: Vec<usize>) -> Self {
        source.push(EOS);
        target.push(EOS);
        Self { source, target }
    }

    pub fn lengths(&self) -> (usize, usize) {
        (self.source.len(), self.target.len())
    }
}

/// Padded cost of a batch: `B · max(longest source, longest target)`.
fn cost(count: usize, max_src: usize, max_tgt: usize) -> usize {
    count * max_src.max(max_tgt)
}

/// Groups pair indices into batches whose padded token count stays within
/// `budget`. Pairs are sorted by length and filled greedily; the batch order
/// is then shuffled with `seed`.
pub fn batch_by_tokens(lengths: &[(usize, usize)], budget: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some((i, l)) = lengths.iter().enumerate().find(|(_, l)| l.0.max(l.1) > budget) {
        return Err(MmtError::Data(format!(
            "sentence {i} has {} tokens, more than the batch budget {budget}",
            l.0.max(l.1)
        )));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i].0, lengths[i].1, i));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut ms, mut mt) = (0, 0);
    for i in order {
        let (s, t) = lengths[i];
        if !cur.is_empty() && cost(cur.len() + 1, ms.max(s), mt.max(t)) > budget {
            batches.push(std::mem::take(&mut cur));
            (ms, mt) = (0, 0);
        }
        cur.push(i);
        ms = ms.max(s);
        mt = mt.max(t);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batches)
}

/// Model-ready tensors of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    /// Indices into the encoded corpus.
    pub indices: Vec<usize>,
    pub source: SeqBatch,
    /// Decoder inputs: beginning-of-sequence then the target shifted right.
    pub target_in: SeqBatch,
    /// Gold outputs aligned with `target_in`, padded with the pad id.
    pub target_out: Vec<usize>,
}

impl TokenBatch {
    pub fn build(pairs: &[EncodedPair], indices: &[usize]) -> Result<Self> {
        let srcs: Vec<Vec<usize>> = indices.iter().map(|&i| pairs[i].source.clone()).collect();
        let tgt_in: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| {
                let t = &pairs[i].target;
                std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()).collect()
            })
            .collect();
        let target_in = SeqBatch::from_seqs(&tgt_in)?;
        let mut target_out = vec![PAD; target_in.ids.len()];
        for (b, &i) in indices.iter().enumerate() {
            let t = &pairs[i].target;
            target_out[b * target_in.len..b * target_in.len + t.len()].copy_from_slice(t);
        }
        Ok(Self {
            indices: indices.to_vec(),
            source: SeqBatch::from_seqs(&srcs)?,
            target_in,
            target_out,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
