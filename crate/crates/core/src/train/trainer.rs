//! The training loop: token-budget batches, Adam with warmup, label-smoothed
//! loss, per-epoch validation with early stopping, and checkpoint averaging
//! for inference.

use mmt_autodiff::{rng::derive_seed, Graph, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{average_checkpoints, Checkpoint};
use super::loss::smoothed_cross_entropy;
use super::optim::{AdamConfig, OptimizerState};
use super::schedule::LrSchedule;
use crate::data::batch::{batch_by_tokens, EncodedPair, TokenBatch};
use crate::data::bpe::detokenize;
use crate::data::corpus::{ParallelCorpus, Split};
use crate::data::vocab::{Vocab, PAD};
use crate::error::{MmtError, Result};
use crate::fusion::{frozen_noise_feature, split_gate_records, GateRecord};
use crate::model::{beam_decode, greedy_decode, ForwardOpts, ModelConfig, ModelKind, ModelScorer, Seq2Seq, VisualBatch};
use crate::params::Bound;
use crate::probe::{bleu4, micro_avg_gate, BleuReport, EpochRecord, GateLogLine, GateSummary};
use crate::retriever::FeatureStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Store,
    Noise,
}

impl std::str::FromStr for FeatureSource {
    type Err = MmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "store" => Ok(FeatureSource::Store),
            "noise" => Ok(FeatureSource::Noise),
            other => Err(MmtError::Config(format!("unknown feature source {other:?}"))),
        }
    }
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Store => "store",
            FeatureSource::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub model_kind: ModelKind,
    pub feature_source: FeatureSource,
    pub warmup_steps: u64,
    pub lr_peak: f64,
    pub lr_init: f64,
    pub token_budget: usize,
    pub label_smoothing: f64,
    /// Replaces the model configuration's dropout rate.
    pub dropout: f64,
    pub patience: usize,
    pub avg_last: usize,
    pub beam: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub seed: u64,
    pub max_epochs: usize,
    /// Images retrieved per sentence for the retrieval model.
    pub retrieval_k: usize,
    /// Log training-batch gate summaries every this many batches (0: never).
    pub gate_log_every: usize,
    /// Keep full gating matrices of validation passes in the gate log.
    pub gate_log_full: bool,
    pub tau: f64,
    /// Decoding stops after `source length + max_len_margin` tokens.
    pub max_len_margin: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::TextOnly,
            feature_source: FeatureSource::Store,
            warmup_steps: 2000,
            lr_peak: 0.005,
            lr_init: 1e-7,
            token_budget: 4096,
            label_smoothing: 0.1,
            dropout: 0.3,
            patience: 10,
            avg_last: 10,
            beam: 5,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
            seed: 0,
            max_epochs: 500,
            retrieval_k: 5,
            gate_log_every: 0,
            gate_log_full: false,
            tau: crate::probe::DEFAULT_TAU,
            max_len_margin: 10,
        }
    }
}

impl TrainRunConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            init: self.lr_init,
            peak: self.lr_peak,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmtError::Config(m));
        if self.token_budget == 0 || self.patience == 0 || self.avg_last == 0 || self.beam == 0 || self.max_epochs == 0 {
            return bad("token_budget, patience, avg_last, beam and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.dropout) {
            return bad("label_smoothing and dropout must lie in [0, 1)".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_init >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative (peak positive)".into());
        }
        if self.model_kind == ModelKind::Rmmt && self.retrieval_k == 0 {
            return bad("retrieval_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Encoded pairs of one split with their visual context.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub pairs: Vec<EncodedPair>,
    pub ids: Vec<String>,
    /// Per pair: one feature vector for gated fusion, `K` for retrieval fusion.
    pub visual: Option<Vec<Vec<Vec<f32>>>>,
    /// Detokenized target text.
    pub references: Vec<String>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn lengths(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(EncodedPair::lengths).collect()
    }

    pub fn visual_batch(&self, indices: &[usize]) -> Result<Option<VisualBatch<f32>>> {
        let Some(visual) = &self.visual else { return Ok(None) };
        let per = visual[indices[0]].len();
        let d = visual[indices[0]].first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(indices.len() * per * d);
        for &i in indices {
            if visual[i].len() != per {
                return Err(MmtError::Data("sentences carry different numbers of images".into()));
            }
            for f in &visual[i] {
                data.extend_from_slice(f);
            }
        }
        Ok(Some(VisualBatch {
            features: Tensor::new(vec![indices.len() * per, d], data)?,
            per_sentence: per,
        }))
    }
}

/// Key of a sentence for frozen noise: split in the high bits, index low.
fn noise_key(split: Split, index: usize) -> u64 {
    let code = match split {
        Split::Train => 1u64,
        Split::Valid => 2,
        Split::Test => 3,
    };
    (code << 40) | index as u64
}

/// Visual context of a corpus split for `kind`. Retrieval models read the
/// `K` retrieved ids per sentence from `retrieved`.
pub fn visual_features(
    kind: ModelKind,
    source: FeatureSource,
    corpus: &ParallelCorpus,
    store: Option<&FeatureStore>,
    retrieved: Option<&[Vec<String>]>,
    k: usize,
    d_v: usize,
    seed: u64,
) -> Result<Option<Vec<Vec<Vec<f32>>>>> {
    let per = match kind {
        ModelKind::TextOnly => return Ok(None),
        ModelKind::GatedFusion => 1,
        ModelKind::Rmmt => k,
    };
    let noise_seed = derive_seed(seed, 0x6e6f697365);
    let mut out = Vec::with_capacity(corpus.len());
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let feats = match source {
            FeatureSource::Noise => (0..per)
                .map(|slot| frozen_noise_feature(noise_seed, noise_key(corpus.split, i), slot as u64, d_v).vector)
                .collect(),
            FeatureSource::Store => {
                let store = store.ok_or_else(|| MmtError::Config("store features requested without a feature store".into()))?;
                let ids: Vec<&str> = match kind {
                    ModelKind::Rmmt => {
                        let r = retrieved
                            .and_then(|r| r.get(i))
                            .ok_or_else(|| MmtError::Data(format!("no retrieved images for {}", corpus.sentence_id(i))))?;
                        if r.len() < per {
                            return Err(MmtError::Data(format!("{} retrieved images, need {per}", r.len())));
                        }
                        r[..per].iter().map(String::as_str).collect()
                    }
                    _ => vec![pair.feature_id.as_str()],
                };
                ids.into_iter()
                    .map(|id| {
                        let v = store.get(id)?;
                        if v.len() != d_v {
                            return Err(MmtError::Data(format!("feature {id} has {} dims, expected {d_v}", v.len())));
                        }
                        Ok(v.to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        out.push(feats);
    }
    Ok(Some(out))
}

/// Patience-based early stopping on validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records `loss` at `epoch` (1-based); returns `true` once `patience`
    /// epochs have passed without a strict improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
        }
        epoch >= self.best_epoch + self.patience
    }
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Seq2Seq<f32>,
    /// The last `avg_last` epoch checkpoints, oldest first.
    pub checkpoints: Vec<Checkpoint>,
    pub history: Vec<EpochRecord>,
    pub gate_log: Vec<GateLogLine>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainOutcome {
    pub fn averaged_model(&self) -> Result<Seq2Seq<f32>> {
        let avg = average_checkpoints(&self.checkpoints)?;
        let mut model = self.model.clone();
        model.store.load(&avg.params)?;
        Ok(model)
    }
}

pub fn gate_records_of(
    gate: &Tensor<f32>,
    batch: &TokenBatch,
    split: &SplitData,
    epoch: usize,
) -> Result<Vec<GateRecord>> {
    let ids: Vec<String> = batch.indices.iter().map(|&i| split.ids[i].clone()).collect();
    split_gate_records(gate, batch.source.len, &batch.source.lens, &ids, epoch)
}

/// Eval-mode smoothed loss over a split plus the gate records of every
/// sentence (fusion models).
pub fn validate(
    model: &Seq2Seq<f32>,
    data: &SplitData,
    run: &TrainRunConfig,
    epoch: usize,
) -> Result<(f64, Vec<GateRecord>)> {
    let batches = batch_by_tokens(&data.lengths(), run.token_budget, 0)?;
    let (mut total, mut count) = (0.0, 0usize);
    let mut records = Vec::new();
    for idx in &batches {
        let batch = TokenBatch::build(&data.pairs, idx)?;
        let visual = data.visual_batch(idx)?;
        let mut g = Graph::new();
        let mut p = Bound::new(&model.store);
        let out = model.forward(&mut g, &mut p, &batch.source, &batch.target_in, visual.as_ref(), ForwardOpts::eval())?;
        let (loss, n) = smoothed_cross_entropy(&mut g, out.logits, &batch.target_out, run.label_smoothing, PAD)?;
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
        if let Some(gate) = out.gate {
            records.extend(gate_records_of(g.value(gate), &batch, data, epoch)?);
        }
    }
    Ok((total / count as f64, records))
}

/// Runs the full recipe. `sink` sees every epoch's record and checkpoint
/// (for persistence) as soon as the epoch completes.
pub fn train(
    model_cfg: &ModelConfig,
    run: &TrainRunConfig,
    train_data: &SplitData,
    valid_data: &SplitData,
    d_v: Option<usize>,
    config_hash: u64,
    sink: &mut dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    if valid_data.is_empty() || train_data.is_empty() {
        return Err(MmtError::Data("training needs non-empty train and valid splits".into()));
    }
    let mut cfg = model_cfg.clone();
    cfg.dropout = run.dropout;
    let mut model = Seq2Seq::<f32>::new(cfg, run.model_kind, d_v, run.seed)?;
    let mut opt = OptimizerState::new(run.adam(), model.store.tensors_mut());
    let schedule = run.schedule();
    let lengths = train_data.lengths();
    let mut stopper = EarlyStopping::new(run.patience);
    let mut history = Vec::new();
    let mut gate_log = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut stopped_epoch = 0;
    for epoch in 1..=run.max_epochs {
        let batches = batch_by_tokens(&lengths, run.token_budget, derive_seed(run.seed, epoch as u64))?;
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let mut lr = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch = TokenBatch::build(&train_data.pairs, idx)?;
            let visual = train_data.visual_batch(idx)?;
            let step = opt.step + 1;
            let (loss, n, grads, gate) = {
                let mut g = Graph::with_seed(derive_seed(run.seed ^ 0x5eed, step));
                let mut p = Bound::new(&model.store);
                let out = model.forward(&mut g, &mut p, &batch.source, &batch.target_in, visual.as_ref(), ForwardOpts::train())?;
                let (loss, n) = smoothed_cross_entropy(&mut g, out.logits, &batch.target_out, run.label_smoothing, PAD)?;
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(MmtError::Divergence(format!(
                        "loss {value} at epoch {epoch}, update {step}, lr {:e}",
                        schedule.lr_at_step(step)
                    )));
                }
                let gate = match out.gate {
                    Some(gv) if run.gate_log_every > 0 && b % run.gate_log_every == 0 => Some(g.value(gv).clone()),
                    _ => None,
                };
                g.backward(loss)?;
                (value, n, p.grads(&mut g), gate)
            };
            if let Some(gate) = gate {
                for r in gate_records_of(&gate, &batch, train_data, epoch)? {
                    gate_log.push(GateLogLine::Summary(GateSummary::of(&r, run.tau)));
                }
            }
            lr = schedule.lr_at_step(step);
            opt.step(model.store.tensors_mut(), &grads, lr)?;
            loss_sum += loss * n as f64;
            loss_count += n;
        }
        let (val_loss, records) = validate(&model, valid_data, run, epoch)?;
        if !val_loss.is_finite() {
            return Err(MmtError::Divergence(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let gate = if records.is_empty() {
            None
        } else {
            Some(micro_avg_gate(&records, run.tau)?)
        };
        gate_log.extend(records.into_iter().map(|r| {
            if run.gate_log_full {
                GateLogLine::Full(r)
            } else {
                GateLogLine::Summary(GateSummary::of(&r, run.tau))
            }
        }));
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / loss_count as f64,
            val_loss,
            gate,
            lr,
        };
        let ckpt = Checkpoint::from_store(&model.store, config_hash, epoch, val_loss);
        sink(&record, &ckpt)?;
        history.push(record);
        checkpoints.push(ckpt);
        if checkpoints.len() > run.avg_last {
            checkpoints.remove(0);
        }
        stopped_epoch = epoch;
        if stopper.observe(epoch, val_loss) {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        checkpoints,
        history,
        gate_log,
        best_epoch: stopper.best_epoch,
        stopped_epoch,
    })
}

/// Decodes every pair of a split; beam 1 uses greedy search.
pub fn translate_split(model: &Seq2Seq<f32>, data: &SplitData, beam: usize, margin: usize) -> Result<Vec<Vec<usize>>> {
    (0..data.len())
        .map(|i| {
            let src = &data.pairs[i].source;
            let visual = data.visual_batch(&[i])?;
            let scorer = ModelScorer::new(model, src, visual.as_ref())?;
            let max_len = (src.len() + margin).min(model.cfg.max_len - 1);
            if beam == 1 {
                greedy_decode(&scorer, max_len)
            } else {
                beam_decode(&scorer, beam, max_len)
            }
        })
        .collect()
}

pub fn ids_to_text(vocab: &Vocab, ids: &[usize]) -> String {
    detokenize(&vocab.decode(ids))
}

/// Corpus BLEU of beam translations against the split references.
pub fn evaluate_bleu(model: &Seq2Seq<f32>, data: &SplitData, vocab: &Vocab, beam: usize, margin: usize) -> Result<(BleuReport, Vec<String>)> {
    let hyps: Vec<String> = translate_split(model, data, beam, margin)?
        .iter()
        .map(|ids| ids_to_text(vocab, ids))
        .collect();
    Ok((bleu4(&hyps, &data.references)?, hyps))
}

/// Teacher-forced argmax accuracy over non-pad target positions.
pub fn token_accuracy(model: &Seq2Seq<f32>, data: &SplitData, budget: usize) -> Result<f64> {
    let batches = batch_by_tokens(&data.lengths(), budget, 0)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for idx in &batches {
        let batch = TokenBatch::build(&data.pairs, idx)?;
        let visual = data.visual_batch(idx)?;
        let mut g = Graph::new();
        let mut p = Bound::new(&model.store);
        let out = model.forward(&mut g, &mut p, &batch.source, &batch.target_in, visual.as_ref(), ForwardOpts::eval())?;
        let logits = g.value(out.logits);
        for (r, &gold) in batch.target_out.iter().enumerate() {
            if gold == PAD {
                continue;
            }
            let row = logits.row(r);
            let arg = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            hit += usize::from(arg == gold);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
