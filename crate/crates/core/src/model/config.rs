use serde::{Deserialize, Serialize};

use crate::error::{MmtError, Result};

/// Layer counts and widths of the encoder–decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder layers; the decoder has the same count.
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self::preset(4, 128, 256, 4, vocab_size)
    }

    pub fn small(vocab_size: usize) -> Self {
        Self::preset(6, 512, 1024, 4, vocab_size)
    }

    pub fn base(vocab_size: usize) -> Self {
        Self::preset(6, 512, 2048, 8, vocab_size)
    }

    pub fn by_name(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "small" => Ok(Self::small(vocab_size)),
            "base" => Ok(Self::base(vocab_size)),
            other => Err(MmtError::Config(format!("unknown model preset {other:?}"))),
        }
    }

    fn preset(n_layers: usize, d_model: usize, d_ffn: usize, n_heads: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            d_model,
            d_ffn,
            n_heads,
            dropout: 0.3,
            vocab_size,
            max_len: 256,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MmtError::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(MmtError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MmtError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Parameter count of the text-only model: shared embedding, encoder
    /// (self-attention + FFN), decoder (self + cross attention + FFN), layer
    /// norms. The output projection is tied to the embedding.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ffn = d * self.d_ffn + self.d_ffn + self.d_ffn * d + d;
        let norm = 2 * d;
        let enc = attn + ffn + 2 * norm;
        let dec = 2 * attn + ffn + 3 * norm;
        self.vocab_size * d + self.n_layers * (enc + dec) + 2 * norm
    }
}
