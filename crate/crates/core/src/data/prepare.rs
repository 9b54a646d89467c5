//! Tokenization of whole splits into model-ready id sequences.

use super::batch::EncodedPair;
use super::bpe::{detokenize, normalize, BpeModel};
use super::corpus::ParallelCorpus;
use super::vocab::Vocab;

/// Subword tokens of both sides of every pair.
pub fn tokenize_corpus(corpus: &ParallelCorpus, bpe: &BpeModel, lowercase: bool) -> Vec<(Vec<String>, Vec<String>)> {
    corpus
        .pairs
        .iter()
        .map(|p| (bpe.apply(&normalize(&p.source, lowercase)), bpe.apply(&normalize(&p.target, lowercase))))
        .collect()
}

/// Joint vocabulary over both sides of the tokenized training pairs.
pub fn joint_vocab(tokenized: &[(Vec<String>, Vec<String>)]) -> Vocab {
    let sides: Vec<Vec<String>> = tokenized
        .iter()
        .flat_map(|(s, t)| [s.clone(), t.clone()])
        .collect();
    Vocab::build(&sides)
}

/// Id sequences plus the reference text (the detokenized target, which is
/// the whitespace-normalized target).
pub fn encode_pairs(tokenized: &[(Vec<String>, Vec<String>)], vocab: &Vocab) -> (Vec<EncodedPair>, Vec<String>) {
    tokenized
        .iter()
        .map(|(s, t)| (EncodedPair::new(vocab.encode(s), vocab.encode(t)), detokenize(t)))
        .unzip()
}
