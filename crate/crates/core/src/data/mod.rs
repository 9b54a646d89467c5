//! Corpus ingestion, subword tokenization, batching and the synthetic corpus.

pub mod batch;
pub mod bpe;
pub mod corpus;
pub mod grounded;
pub mod prepare;
pub mod synth;
pub mod vocab;

pub use batch::{batch_by_tokens, EncodedPair, TokenBatch};
pub use bpe::{detokenize, learn_bpe, BpeModel};
pub use corpus::{ParallelCorpus, SentencePair, Split};
pub use grounded::{build_grounded_vocab, mask_grounded_tokens, Stopwords};
pub use synth::{gen_synthetic_corpus, SynthConfig, SynthCorpus, SynthMode};
pub use vocab::Vocab;
