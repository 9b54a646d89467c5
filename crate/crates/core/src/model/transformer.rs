use mmt_autodiff::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{sinusoidal_table, AttnShape, FeedForward, MultiHeadAttention, Norm};
use crate::data::vocab::{BOS, PAD};
use crate::error::{MmtError, Result};
use crate::fusion::{FusionParams, GateMode};
use crate::params::{normal, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TextOnly,
    GatedFusion,
    Rmmt,
}

impl ModelKind {
    pub fn uses_images(self) -> bool {
        !matches!(self, ModelKind::TextOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TextOnly => "text_only",
            ModelKind::GatedFusion => "gated_fusion",
            ModelKind::Rmmt => "rmmt",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = MmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_only" => Ok(ModelKind::TextOnly),
            "gated_fusion" | "gated" => Ok(ModelKind::GatedFusion),
            "rmmt" => Ok(ModelKind::Rmmt),
            other => Err(MmtError::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Right-padded token matrix `[batch, len]`, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn from_seqs(seqs: &[Vec<usize>]) -> Result<Self> {
        Self::padded_to(seqs, seqs.iter().map(Vec::len).max().unwrap_or(0))
    }

    /// Pads every sequence to exactly `len` tokens.
    pub fn padded_to(seqs: &[Vec<usize>], len: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty() || s.len() > len) {
            return Err(MmtError::Data("batch needs non-empty sequences no longer than the pad length".into()));
        }
        let mut ids = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            lens: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn single(seq: &[usize]) -> Result<Self> {
        Self::from_seqs(&[seq.to_vec()])
    }

    /// Number of non-pad positions.
    pub fn tokens(&self) -> usize {
        self.lens.iter().sum()
    }
}

/// Visual input for a batch: `per_sentence` consecutive feature rows per
/// sentence (1 for gated fusion, K for retrieval fusion).
#[derive(Debug, Clone)]
pub struct VisualBatch<T> {
    pub features: Tensor<T>,
    pub per_sentence: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOpts {
    pub training: bool,
    pub gate: GateMode,
}

impl ForwardOpts {
    pub fn train() -> Self {
        Self {
            training: true,
            gate: GateMode::Learned,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            gate: GateMode::Learned,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B*T_tgt, vocab]`.
    pub logits: Var,
    /// Decoder memory `[B*T_src, d]` (the fused representation).
    pub memory: Var,
    /// Gating matrix `[B*T_src, d]` for fusion models.
    pub gate: Option<Var>,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: MultiHeadAttention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: MultiHeadAttention,
    norm_cross: Norm,
    cross_attn: MultiHeadAttention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

/// Pre-norm transformer encoder–decoder with a shared, output-tied embedding
/// and optional gated image fusion between encoder and decoder.
#[derive(Debug, Clone)]
pub struct Seq2Seq<T: Real> {
    pub cfg: ModelConfig,
    pub kind: ModelKind,
    pub store: ParamStore<T>,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    fusion: Option<FusionParams>,
    positions: Tensor<T>,
}

impl<T: Real> Seq2Seq<T> {
    /// `d_v` is required for fusion kinds and ignored for text-only.
    pub fn new(cfg: ModelConfig, kind: ModelKind, d_v: Option<usize>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embed = store.insert("embed.tokens", normal(&mut rng, &[cfg.vocab_size, d], (d as f64).powf(-0.5)));
        let encoder = (0..cfg.n_layers)
            .map(|l| EncoderLayer {
                norm_attn: Norm::new(&mut store, &format!("enc.{l}.ln_attn"), d),
                attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("enc.{l}.attn"), d, cfg.n_heads),
                norm_ffn: Norm::new(&mut store, &format!("enc.{l}.ln_ffn"), d),
                ffn: FeedForward::new(&mut store, &mut rng, &format!("enc.{l}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let enc_norm = Norm::new(&mut store, "enc.ln", d);
        let decoder = (0..cfg.n_layers)
            .map(|l| DecoderLayer {
                norm_self: Norm::new(&mut store, &format!("dec.{l}.ln_self"), d),
                self_attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("dec.{l}.self"), d, cfg.n_heads),
                norm_cross: Norm::new(&mut store, &format!("dec.{l}.ln_cross"), d),
                cross_attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("dec.{l}.cross"), d, cfg.n_heads),
                norm_ffn: Norm::new(&mut store, &format!("dec.{l}.ln_ffn"), d),
                ffn: FeedForward::new(&mut store, &mut rng, &format!("dec.{l}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let dec_norm = Norm::new(&mut store, "dec.ln", d);
        let fusion = match kind {
            ModelKind::TextOnly => None,
            _ => {
                let d_v = d_v.ok_or_else(|| MmtError::Config("fusion models need a feature dimension".into()))?;
                Some(FusionParams::new(&mut store, &mut rng, d_v, d))
            }
        };
        let positions = sinusoidal_table(cfg.max_len + 1, d);
        Ok(Self {
            cfg,
            kind,
            store,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            fusion,
            positions,
        })
    }

    pub fn fusion(&self) -> Option<&FusionParams> {
        self.fusion.as_ref()
    }

    pub fn d_v(&self) -> Option<usize> {
        self.fusion.map(|f| f.d_v)
    }

    fn check_len(&self, batch: &SeqBatch) -> Result<()> {
        if batch.len > self.cfg.max_len {
            return Err(MmtError::Length {
                len: batch.len,
                max_len: self.cfg.max_len,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(MmtError::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn embed_tokens<'a>(&'a self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, batch: &SeqBatch, training: bool) -> Result<Var> {
        self.check_len(batch)?;
        let table = p.var(g, self.embed);
        let x = g.embedding(table, &batch.ids)?;
        let x = g.scale(x, T::of((self.cfg.d_model as f64).sqrt()));
        let x = if self.cfg.positional_encoding {
            let d = self.cfg.d_model;
            let mut pos = Vec::with_capacity(batch.ids.len() * d);
            for _ in 0..batch.batch {
                pos.extend_from_slice(&self.positions.data()[..batch.len * d]);
            }
            let pos = g.constant(Tensor::new(vec![batch.ids.len(), d], pos)?);
            g.add(x, pos)?
        } else {
            x
        };
        Ok(g.dropout(x, self.cfg.dropout, training)?)
    }

    /// Encoder output `H_text` as `[B*T_src, d]`.
    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, src: &SeqBatch, training: bool) -> Result<Var> {
        let shape = AttnShape {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            key_lens: src.lens.clone(),
            causal: false,
        };
        let rate = self.cfg.dropout;
        let mut x = self.embed_tokens(g, p, src, training)?;
        for layer in &self.encoder {
            let h = layer.norm_attn.forward(g, p, x)?;
            let a = layer.attn.forward(g, p, h, h, &shape)?;
            let a = g.dropout(a, rate, training)?;
            x = g.add(x, a)?;
            let h = layer.norm_ffn.forward(g, p, x)?;
            let f = layer.ffn.forward(g, p, h, rate, training)?;
            let f = g.dropout(f, rate, training)?;
            x = g.add(x, f)?;
        }
        self.enc_norm.forward(g, p, x)
    }

    /// Fuses `H_text` with the visual batch; returns `(memory, gate)`.
    pub fn fuse_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        h_text: Var,
        src: &SeqBatch,
        visual: Option<&VisualBatch<T>>,
        gate: GateMode,
    ) -> Result<(Var, Option<Var>)> {
        let Some(fusion) = self.fusion else {
            return Ok((h_text, None));
        };
        let visual = visual.ok_or_else(|| MmtError::Data(format!("{} model needs visual features", self.kind.name())))?;
        if visual.features.rows() != src.batch * visual.per_sentence {
            return Err(MmtError::Data(format!(
                "{} feature rows for {} sentences × {} images",
                visual.features.rows(),
                src.batch,
                visual.per_sentence
            )));
        }
        let feats = g.constant(visual.features.clone());
        let (memory, lambda) = match self.kind {
            ModelKind::GatedFusion if visual.per_sentence == 1 => fusion.fuse_single(g, p, h_text, feats, src.len, gate)?,
            ModelKind::GatedFusion => {
                return Err(MmtError::Data("gated fusion takes exactly one image per sentence".into()))
            }
            _ => fusion.rmmt_fuse(g, p, h_text, feats, visual.per_sentence, src.len, gate)?,
        };
        Ok((memory, Some(lambda)))
    }

    /// Decoder logits `[B*T_tgt, vocab]` for teacher-forced inputs `tgt_in`.
    pub fn decode_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        memory: Var,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
        training: bool,
    ) -> Result<Var> {
        if tgt_in.batch != src.batch {
            return Err(MmtError::Data("source and target batch sizes differ".into()));
        }
        let self_shape = AttnShape {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: tgt_in.len,
            key_lens: tgt_in.lens.clone(),
            causal: true,
        };
        let cross_shape = AttnShape {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: src.len,
            key_lens: src.lens.clone(),
            causal: false,
        };
        let rate = self.cfg.dropout;
        let mut x = self.embed_tokens(g, p, tgt_in, training)?;
        for layer in &self.decoder {
            let h = layer.norm_self.forward(g, p, x)?;
            let a = layer.self_attn.forward(g, p, h, h, &self_shape)?;
            let a = g.dropout(a, rate, training)?;
            x = g.add(x, a)?;
            let h = layer.norm_cross.forward(g, p, x)?;
            let a = layer.cross_attn.forward(g, p, h, memory, &cross_shape)?;
            let a = g.dropout(a, rate, training)?;
            x = g.add(x, a)?;
            let h = layer.norm_ffn.forward(g, p, x)?;
            let f = layer.ffn.forward(g, p, h, rate, training)?;
            let f = g.dropout(f, rate, training)?;
            x = g.add(x, f)?;
        }
        let x = self.dec_norm.forward(g, p, x)?;
        let table = p.var(g, self.embed);
        Ok(g.matmul_nt(x, table)?)
    }

    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
        visual: Option<&VisualBatch<T>>,
        opts: ForwardOpts,
    ) -> Result<ForwardOutput> {
        let h_text = self.encode_graph(g, p, src, opts.training)?;
        let (memory, gate) = self.fuse_graph(g, p, h_text, src, visual, opts.gate)?;
        let logits = self.decode_graph(g, p, memory, src, tgt_in, opts.training)?;
        Ok(ForwardOutput { logits, memory, gate })
    }

    /// Eval-mode memory for a batch: `(memory [B*T, d], gate)`.
    pub fn memory(
        &self,
        src: &SeqBatch,
        visual: Option<&VisualBatch<T>>,
        gate: GateMode,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut g = Graph::new();
        let mut p = Bound::new(&self.store);
        let h = self.encode_graph(&mut g, &mut p, src, false)?;
        let (m, lambda) = self.fuse_graph(&mut g, &mut p, h, src, visual, gate)?;
        Ok((g.value(m).clone(), lambda.map(|l| g.value(l).clone())))
    }

    /// Eval-mode logits for decoder inputs given precomputed memory.
    pub fn logits_from_memory(&self, memory: &Tensor<T>, src: &SeqBatch, tgt_in: &SeqBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut p = Bound::new(&self.store);
        let m = g.constant(memory.clone());
        let logits = self.decode_graph(&mut g, &mut p, m, src, tgt_in, false)?;
        Ok(g.value(logits).clone())
    }
}

/// Encoder output of a single sentence.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    /// `T × d_model`.
    pub h_text: Tensor<T>,
    /// `true` at padding positions.
    pub source_pad_mask: Vec<bool>,
}

/// Eval-mode encoding of one sentence, optionally right-padded to `pad_to`.
pub fn encode<T: Real>(model: &Seq2Seq<T>, source_ids: &[usize], pad_to: Option<usize>) -> Result<EncoderOutput<T>> {
    let len = pad_to.unwrap_or(source_ids.len()).max(source_ids.len());
    let src = SeqBatch::padded_to(&[source_ids.to_vec()], len)?;
    let mut g = Graph::new();
    let mut p = Bound::new(&model.store);
    let h = model.encode_graph(&mut g, &mut p, &src, false)?;
    Ok(EncoderOutput {
        h_text: g.value(h).clone(),
        source_pad_mask: (0..len).map(|i| i >= source_ids.len()).collect(),
    })
}

/// Eval-mode next-token logits `[N × vocab]` for target tokens `y_0..y_{N-1}`:
/// row `i` is conditioned on the fused memory and `y_<i` only.
pub fn decode_logits<T: Real>(
    model: &Seq2Seq<T>,
    fused: &Tensor<T>,
    source_len: usize,
    target: &[usize],
) -> Result<Tensor<T>> {
    let mut inputs = Vec::with_capacity(target.len().max(1));
    inputs.push(BOS);
    inputs.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    let rows = fused.rows();
    let src = SeqBatch {
        ids: vec![PAD; rows],
        batch: 1,
        len: rows,
        lens: vec![source_len],
    };
    model.logits_from_memory(fused, &src, &SeqBatch::single(&inputs)?)
}
