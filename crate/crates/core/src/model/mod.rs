//! Transformer encoder–decoder with optional gated image fusion.

pub mod config;
pub mod decode;
pub mod layers;
pub mod transformer;

pub use config::ModelConfig;
pub use decode::{beam_decode, beam_search, greedy_decode, DecodeHypothesis, LogitSource, ModelScorer};
pub use transformer::{decode_logits, encode, EncoderOutput, ForwardOpts, ForwardOutput, ModelKind, Seq2Seq, SeqBatch, VisualBatch};
