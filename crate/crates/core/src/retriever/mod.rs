//! Dense dual-encoder image retrieval.
//!
//! A sentence is embedded as `W_text · meanpool(encoder(x))` and scored
//! against stored image vectors by inner product.

mod store;

pub use store::FeatureStore;

use std::cmp::Ordering;

use mmt_autodiff::{Graph, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmtError, Result};
use crate::model::layers::{sinusoidal_table, AttnShape, FeedForward, MultiHeadAttention, Norm};
use crate::model::SeqBatch;
use crate::params::{normal, scaled_uniform, Bound, ParamId, ParamStore};
use crate::train::optim::{AdamConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverConfig {
    pub n_layers: usize,
    pub d_enc: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Output dimension; must equal the store dimension.
    pub d_r: usize,
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.n_layers, self.d_enc, self.d_ffn, self.n_heads, self.vocab_size, self.max_len, self.d_r].contains(&0) {
            return Err(MmtError::Config("retriever dimensions must be positive".into()));
        }
        if !self.d_enc.is_multiple_of(self.n_heads) {
            return Err(MmtError::Config("retriever d_enc not divisible by n_heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm_attn: Norm,
    attn: MultiHeadAttention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

/// Small transformer text encoder with mean pooling and output projection.
#[derive(Debug, Clone)]
pub struct RetrieverParams<T: Real> {
    pub cfg: RetrieverConfig,
    pub store: ParamStore<T>,
    embed: ParamId,
    layers: Vec<Layer>,
    norm: Norm,
    w_text: ParamId,
    positions: Tensor<T>,
}

impl<T: Real> RetrieverParams<T> {
    pub fn new(cfg: RetrieverConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_enc;
        let embed = store.insert("ret.embed", normal(&mut rng, &[cfg.vocab_size, d], (d as f64).powf(-0.5)));
        let layers = (0..cfg.n_layers)
            .map(|l| Layer {
                norm_attn: Norm::new(&mut store, &format!("ret.{l}.ln_attn"), d),
                attn: MultiHeadAttention::new(&mut store, &mut rng, &format!("ret.{l}.attn"), d, cfg.n_heads),
                norm_ffn: Norm::new(&mut store, &format!("ret.{l}.ln_ffn"), d),
                ffn: FeedForward::new(&mut store, &mut rng, &format!("ret.{l}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let norm = Norm::new(&mut store, "ret.ln", d);
        let w_text = store.insert("ret.w_text", scaled_uniform(&mut rng, d, cfg.d_r));
        let positions = sinusoidal_table(cfg.max_len, d);
        Ok(Self {
            cfg,
            store,
            embed,
            layers,
            norm,
            w_text,
            positions,
        })
    }

    pub fn w_text(&self) -> &Tensor<T> {
        self.store.get(self.w_text)
    }

    fn check(&self, batch: &SeqBatch) -> Result<()> {
        if batch.lens.contains(&0) {
            return Err(MmtError::Data("cannot embed an empty sentence".into()));
        }
        if batch.len > self.cfg.max_len {
            return Err(MmtError::Length {
                len: batch.len,
                max_len: self.cfg.max_len,
            });
        }
        if batch.ids.iter().any(|&i| i >= self.cfg.vocab_size) {
            return Err(MmtError::Data("token id outside the retriever vocabulary".into()));
        }
        Ok(())
    }

    /// Mean-pooled encoder states `[B, d_enc]`.
    pub fn pool_graph<'a>(&'a self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, batch: &SeqBatch) -> Result<Var> {
        self.check(batch)?;
        let d = self.cfg.d_enc;
        let table = p.var(g, self.embed);
        let x = g.embedding(table, &batch.ids)?;
        let x = g.scale(x, T::of((d as f64).sqrt()));
        let mut pos = Vec::with_capacity(batch.ids.len() * d);
        for _ in 0..batch.batch {
            pos.extend_from_slice(&self.positions.data()[..batch.len * d]);
        }
        let pos = g.constant(Tensor::new(vec![batch.ids.len(), d], pos)?);
        let mut x = g.add(x, pos)?;
        let shape = AttnShape {
            batch: batch.batch,
            q_len: batch.len,
            k_len: batch.len,
            key_lens: batch.lens.clone(),
            causal: false,
        };
        for layer in &self.layers {
            let h = layer.norm_attn.forward(g, p, x)?;
            let a = layer.attn.forward(g, p, h, h, &shape)?;
            x = g.add(x, a)?;
            let h = layer.norm_ffn.forward(g, p, x)?;
            let f = layer.ffn.forward(g, p, h, 0.0, false)?;
            x = g.add(x, f)?;
        }
        let x = self.norm.forward(g, p, x)?;
        Ok(g.mean_pool(x, batch.len, &batch.lens)?)
    }

    /// Text embeddings `[B, d_r]`.
    pub fn embed_graph<'a>(&'a self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, batch: &SeqBatch) -> Result<Var> {
        let pooled = self.pool_graph(g, p, batch)?;
        let w = p.var(g, self.w_text);
        Ok(g.matmul(pooled, w)?)
    }

    pub fn pool(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(MmtError::Data("cannot embed an empty sentence".into()));
        }
        let mut g = Graph::new();
        let mut p = Bound::new(&self.store);
        let v = self.pool_graph(&mut g, &mut p, &SeqBatch::single(ids)?)?;
        Ok(g.value(v).data().iter().map(|x| x.as_f64()).collect())
    }

    /// Projects an externally computed pooled sentence vector.
    pub fn embed_pooled(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let w = self.w_text();
        if pooled.len() != w.rows() {
            return Err(MmtError::Data(format!(
                "pooled vector has {} dims, encoder width is {}",
                pooled.len(),
                w.rows()
            )));
        }
        let mut out = vec![0.0; w.cols()];
        for (i, &x) in pooled.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += x * wij.as_f64();
            }
        }
        Ok(out)
    }

    pub fn embed_text(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.embed_pooled(&self.pool(ids)?)
    }
}

pub fn score(text: &[f64], image: &[f64]) -> Result<f64> {
    if text.len() != image.len() {
        return Err(MmtError::Data(format!(
            "cannot score a {}-dim text vector against a {}-dim image vector",
            text.len(),
            image.len()
        )));
    }
    Ok(text.iter().zip(image).map(|(a, b)| a * b).sum())
}

/// Store rows of the `k` best-scoring images for a query vector: scores
/// descending, ties in store order.
pub fn topk_by_vector(query: &[f64], store: &FeatureStore, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > store.len() {
        return Err(MmtError::Config(format!("K = {k} outside 1..={}", store.len())));
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(MmtError::Data("retrieval query is not finite".into()));
    }
    let scores = (0..store.len())
        .map(|i| {
            let row: Vec<f64> = store.row(i).iter().map(|&x| x as f64).collect();
            score(query, &row)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..store.len()).collect();
    // Scores are finite; partial_cmp also treats -0.0 and 0.0 as a tie.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

pub fn retrieve_topk<T: Real>(ids: &[usize], store: &FeatureStore, params: &RetrieverParams<T>, k: usize) -> Result<Vec<String>> {
    let q = params.embed_text(ids)?;
    Ok(topk_by_vector(&q, store, k)?
        .into_iter()
        .map(|i| store.ids()[i].clone())
        .collect())
}

/// Fraction of queries whose gold id is among their top `k`.
pub fn recall_at_k_vectors(queries: &[(Vec<f64>, String)], store: &FeatureStore, k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(MmtError::Data("recall needs at least one query".into()));
    }
    let mut hits = 0;
    for (q, gold) in queries {
        let gold = store
            .position(gold)
            .ok_or_else(|| MmtError::Data(format!("gold id {gold:?} not in store")))?;
        if topk_by_vector(q, store, k)?.contains(&gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

pub fn recall_at_k<T: Real>(
    queries: &[(Vec<usize>, String)],
    store: &FeatureStore,
    params: &RetrieverParams<T>,
    k: usize,
) -> Result<f64> {
    let vectors = queries
        .iter()
        .map(|(ids, gold)| Ok((params.embed_text(ids)?, gold.clone())))
        .collect::<Result<Vec<_>>>()?;
    recall_at_k_vectors(&vectors, store, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// In-batch symmetric cross-entropy over the `B × B` score matrix of texts
/// against their gold images. Returns the loss value.
pub fn contrastive_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    text: Var,
    images: Var,
) -> Result<Var> {
    let b = g.shape(text)[0];
    if b < 2 {
        return Err(MmtError::Data("contrastive retrieval loss needs at least two pairs per batch".into()));
    }
    let mut diag = vec![T::zero(); b * b];
    for i in 0..b {
        diag[i * b + i] = T::of(-0.5 / b as f64);
    }
    let s = g.matmul_nt(text, images)?;
    let st = g.matmul_nt(images, text)?;
    let ls = g.log_softmax_rows(s);
    let lst = g.log_softmax_rows(st);
    let a = g.weighted_sum(ls, diag.clone())?;
    let c = g.weighted_sum(lst, diag)?;
    Ok(g.add(a, c)?)
}

/// Trains the text side against fixed image vectors. Returns the mean loss
/// of each epoch.
pub fn pretrain_retriever<T: Real>(
    params: &mut RetrieverParams<T>,
    pairs: &[(Vec<usize>, String)],
    store: &FeatureStore,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if cfg.batch_size < 2 || pairs.len() < 2 {
        return Err(MmtError::Data("contrastive retrieval loss needs at least two pairs per batch".into()));
    }
    if store.dim() != params.cfg.d_r {
        return Err(MmtError::Config(format!(
            "retriever outputs {} dims but the store holds {}",
            params.cfg.d_r,
            store.dim()
        )));
    }
    let gold = pairs
        .iter()
        .map(|(_, id)| store.position(id).ok_or_else(|| MmtError::Data(format!("gold id {id:?} not in store"))))
        .collect::<Result<Vec<usize>>>()?;
    let mut opt = OptimizerState::new(AdamConfig::default(), params.store.tensors_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // A trailing singleton cannot form a contrastive batch.
        if chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
        }
        let mut total = 0.0;
        for chunk in &chunks {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| pairs[i].0.clone()).collect();
            let batch = SeqBatch::from_seqs(&seqs)?;
            let img: Vec<T> = chunk
                .iter()
                .flat_map(|&i| store.row(gold[i]).iter().map(|&x| T::of(x as f64)))
                .collect();
            let grads = {
                let mut g = Graph::new();
                let mut p = Bound::new(&params.store);
                let text = params.embed_graph(&mut g, &mut p, &batch)?;
                let images = g.constant(Tensor::new(vec![chunk.len(), store.dim()], img)?);
                let loss = contrastive_loss(&mut g, text, images)?;
                total += g.value(loss).data()[0].as_f64();
                g.backward(loss)?;
                p.grads(&mut g)
            };
            opt.step(params.store.tensors_mut(), &grads, cfg.lr)?;
        }
        let mean = total / chunks.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(MmtError::Divergence(format!("retriever loss became {mean}")));
        }
        history.push(mean);
    }
    Ok(history)
}
