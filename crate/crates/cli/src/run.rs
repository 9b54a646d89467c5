//! Training, translation and retrieval commands.

use std::path::{Path, PathBuf};

use mmt_core::data::bpe::normalize;
use mmt_core::data::grounded::mask_sentence;
use mmt_core::data::{EncodedPair, ParallelCorpus, SentencePair, Split};
use mmt_core::model::{ModelKind, Seq2Seq};
use mmt_core::probe::gate::write_gate_log;
use mmt_core::probe::{emit_dynamics_csv, history_csv, BleuReport, EpochRecord, GateStats};
use mmt_core::retriever::{pretrain_retriever, recall_at_k, retrieve_topk, FeatureStore, RetrieverParams};
use mmt_core::train::trainer::{evaluate_bleu, ids_to_text, translate_split, visual_features};
use mmt_core::train::{average_checkpoints, train, Checkpoint, FeatureSource, SplitData};
use mmt_core::{MmtError, Result};

use crate::config::ExperimentConfig;
use crate::prepare::{read_text, write_file, Prepared};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const AVERAGED: &str = "averaged.ckpt";
pub const RETRIEVER: &str = "retriever.ckpt";

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join(RESOLVED_CONFIG)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.0.join("checkpoints")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch{epoch:04}.ckpt"))
    }

    pub fn averaged(&self) -> PathBuf {
        self.0.join(AVERAGED)
    }

    pub fn retriever(&self) -> PathBuf {
        self.0.join(RETRIEVER)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

/// Feature dimension for a run: the store's, or `fusion.d_v` for noise.
fn feature_dim(cfg: &ExperimentConfig, store: Option<&FeatureStore>) -> Result<Option<usize>> {
    if !cfg.model.kind.uses_images() {
        return Ok(None);
    }
    match (store, cfg.fusion.d_v) {
        (Some(s), Some(d)) if s.dim() != d => Err(MmtError::Config(format!(
            "fusion.d_v = {d} but the feature store holds {}-dim vectors",
            s.dim()
        ))),
        (Some(s), _) => Ok(Some(s.dim())),
        (None, Some(d)) => Ok(Some(d)),
        (None, None) => Err(MmtError::Config("image models need a feature store or fusion.d_v".into())),
    }
}

fn store_for_features<'s>(cfg: &ExperimentConfig, store: Option<&'s FeatureStore>) -> Result<Option<&'s FeatureStore>> {
    match (cfg.fusion.features, store) {
        (FeatureSource::Store, None) if cfg.model.kind.uses_images() => {
            Err(MmtError::Config("store features requested but no feature store is configured".into()))
        }
        (_, s) => Ok(s),
    }
}

fn split_data(
    cfg: &ExperimentConfig,
    corpus: &ParallelCorpus,
    pairs: Vec<EncodedPair>,
    references: Vec<String>,
    store: Option<&FeatureStore>,
    retrieved: Option<&[Vec<String>]>,
    d_v: Option<usize>,
) -> Result<SplitData> {
    let visual = match d_v {
        Some(d) => visual_features(
            cfg.model.kind,
            cfg.fusion.features,
            corpus,
            store,
            retrieved,
            cfg.fusion.retrieval_k,
            d,
            cfg.training.seed,
        )?,
        None => None,
    };
    Ok(SplitData {
        split: corpus.split,
        pairs,
        ids: (0..corpus.len()).map(|i| corpus.sentence_id(i)).collect(),
        visual,
        references,
    })
}

fn retriever_params(cfg: &ExperimentConfig, vocab: usize, store: &FeatureStore) -> Result<RetrieverParams<f32>> {
    RetrieverParams::new(cfg.retriever.encoder(vocab, store.dim()), cfg.retriever.seed)
}

/// Source ids without the end-of-sequence marker, truncated to the
/// retriever's length limit.
fn retrieval_query(pair: &EncodedPair, max_len: usize) -> Vec<usize> {
    let ids = &pair.source[..pair.source.len() - 1];
    let ids = if ids.is_empty() { &pair.source[..] } else { ids };
    ids[..ids.len().min(max_len)].to_vec()
}

/// Pretrains the retriever on training sentences paired with their images.
fn pretrain(cfg: &ExperimentConfig, vocab: usize, pairs: &[EncodedPair], corpus: &ParallelCorpus, store: &FeatureStore) -> Result<(RetrieverParams<f32>, Vec<f64>)> {
    let mut params = retriever_params(cfg, vocab, store)?;
    let queries: Vec<(Vec<usize>, String)> = pairs
        .iter()
        .zip(&corpus.pairs)
        .map(|(p, s)| (retrieval_query(p, cfg.retriever.max_len), s.feature_id.clone()))
        .collect();
    let history = pretrain_retriever(&mut params, &queries, store, &cfg.retriever.pretrain())?;
    Ok((params, history))
}

fn retrieve_all(params: &RetrieverParams<f32>, pairs: &[EncodedPair], store: &FeatureStore, k: usize, max_len: usize) -> Result<Vec<Vec<String>>> {
    pairs.iter().map(|p| retrieve_topk(&retrieval_query(p, max_len), store, params, k)).collect()
}

fn lines(rows: &[String]) -> String {
    rows.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Test-set BLEU of the averaged model.
    pub test_bleu: BleuReport,
    /// Validation gate statistics of the last epoch.
    pub final_gate: Option<GateStats>,
    pub config_hash: u64,
}

/// Trains one model from prepared artifacts and writes the run directory:
/// resolved config, per-epoch checkpoints (the last `avg_last` are kept),
/// the averaged checkpoint, history and dynamics CSVs, the gate log, test
/// translations and their BLEU.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, progress: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let run_dir = RunDir(out.to_path_buf());
    let hash = cfg.hash();
    write_file(&run_dir.config(), cfg.resolved())?;
    if progress {
        eprintln!("config {:016x} -> {}", hash, run_dir.config().display());
    }
    let prep = Prepared::load(cfg)?;
    let store = store_for_features(cfg, prep.store.as_ref())?;
    let d_v = feature_dim(cfg, prep.store.as_ref())?;
    let encoded: Vec<(Vec<EncodedPair>, Vec<String>)> =
        Split::ALL.iter().map(|&s| prep.encode(cfg, s)).collect::<Result<_>>()?;

    let retrieved: Option<Vec<Vec<Vec<String>>>> = match (cfg.model.kind, cfg.fusion.features) {
        (ModelKind::Rmmt, FeatureSource::Store) => {
            let store = store.expect("checked above");
            let (params, losses) = pretrain(cfg, prep.vocab.len(), &encoded[0].0, &prep.corpora[0], store)?;
            if progress {
                eprintln!("retriever pretraining losses {losses:?}");
            }
            Checkpoint::from_store(&params.store, hash, 0, losses.last().copied().unwrap_or(f64::NAN))
                .save(&run_dir.retriever())?;
            let k = cfg.fusion.retrieval_k;
            let all = encoded
                .iter()
                .map(|(pairs, _)| retrieve_all(&params, pairs, store, k, cfg.retriever.max_len))
                .collect::<Result<Vec<_>>>()?;
            for (split, ids) in Split::ALL.iter().zip(&all) {
                let rows: Vec<String> = ids.iter().map(|r| r.join(" ")).collect();
                write_file(&run_dir.file(&format!("retrieved.{split}.txt")), lines(&rows))?;
            }
            Some(all)
        }
        _ => None,
    };
    let data: Vec<SplitData> = Split::ALL
        .iter()
        .zip(encoded)
        .map(|(&s, (pairs, refs))| {
            let r = retrieved.as_ref().map(|r| r[s as usize].as_slice());
            split_data(cfg, &prep.corpora[s as usize], pairs, refs, store, r, d_v)
        })
        .collect::<Result<_>>()?;

    let run = cfg.run_config();
    let model_cfg = cfg.model.model_config(prep.vocab.len(), run.dropout);
    let ckpt_dir = run_dir.checkpoints();
    if ckpt_dir.exists() {
        std::fs::remove_dir_all(&ckpt_dir).map_err(|e| MmtError::io(&ckpt_dir, e))?;
    }
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| MmtError::io(&ckpt_dir, e))?;
    let mut sink = |rec: &EpochRecord, ckpt: &Checkpoint| -> Result<()> {
        ckpt.save(&run_dir.epoch_checkpoint(rec.epoch))?;
        if rec.epoch > run.avg_last {
            let old = run_dir.epoch_checkpoint(rec.epoch - run.avg_last);
            std::fs::remove_file(&old).map_err(|e| MmtError::io(&old, e))?;
        }
        if progress {
            let gate = rec.gate.map_or_else(String::new, |g| format!(" lambda_bar {:.4e}", g.lambda_bar));
            eprintln!(
                "epoch {:3} train {:.4} valid {:.4}{gate} lr {:.3e}",
                rec.epoch, rec.train_loss, rec.val_loss, rec.lr
            );
        }
        Ok(())
    };
    let outcome = train(&model_cfg, &run, &data[0], &data[1], d_v, hash, &mut sink)?;
    average_checkpoints(&outcome.checkpoints)?.save(&run_dir.averaged())?;
    write_file(&run_dir.file("history.csv"), history_csv(&outcome.history))?;
    if cfg.model.kind.uses_images() {
        write_file(&run_dir.file("dynamics.csv"), emit_dynamics_csv(&outcome.history)?)?;
        let mut log = Vec::new();
        write_gate_log(&mut log, &outcome.gate_log).map_err(|e| MmtError::io(run_dir.file("gates.jsonl"), e))?;
        write_file(&run_dir.file("gates.jsonl"), log)?;
    }
    let model = outcome.averaged_model()?;
    let (bleu, hyps) = evaluate_bleu(&model, &data[2], &prep.vocab, run.beam, run.max_len_margin)?;
    write_file(&run_dir.file("test.hyp"), lines(&hyps))?;
    write_file(&run_dir.file("bleu.csv"), format!("{}\n{}\n", BleuReport::CSV_HEADER, bleu.csv_row()))?;
    if progress {
        eprintln!("test {}", bleu.summary());
    }
    Ok(TrainReport {
        final_gate: outcome.history.last().and_then(|r| r.gate),
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        stopped_epoch: outcome.stopped_epoch,
        test_bleu: bleu,
        config_hash: hash,
    })
}

/// The run's resolved configuration.
pub fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig> {
    let path = RunDir(run_dir.to_path_buf()).config();
    ExperimentConfig::from_parts(Some(&read_text(&path)?), &[])
}

/// A checkpoint file, or the average of every `*.ckpt` in a directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_dir() {
        return Checkpoint::load(path);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| MmtError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(MmtError::Data(format!("no checkpoints in {}", path.display())));
    }
    let ckpts = files.iter().map(|f| Checkpoint::load(f)).collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}

pub struct TranslateRequest<'a> {
    pub run_dir: &'a Path,
    /// Defaults to the run's averaged checkpoint.
    pub checkpoint: Option<&'a Path>,
    pub input: &'a Path,
    /// One feature id per input line, for store features.
    pub feature_ids: Option<&'a Path>,
    pub output: &'a Path,
    /// Defaults to the configured beam size.
    pub beam: Option<usize>,
}

/// Translates one source sentence per line into one detokenized
/// translation per line.
pub fn cmd_translate(req: &TranslateRequest<'_>) -> Result<usize> {
    let cfg = load_run_config(req.run_dir)?;
    let run_dir = RunDir(req.run_dir.to_path_buf());
    let prep = Prepared::load(&cfg)?;
    let ckpt = load_checkpoint(req.checkpoint.map_or_else(|| run_dir.averaged(), Path::to_path_buf).as_path())?;
    let rows = ckpt
        .get("embed.tokens")
        .ok_or_else(|| MmtError::Data("checkpoint has no token embedding".into()))?
        .shape()[0];
    if rows != prep.vocab.len() {
        return Err(MmtError::Data(format!(
            "checkpoint vocabulary has {rows} entries but the prepared vocabulary has {}",
            prep.vocab.len()
        )));
    }
    let store = store_for_features(&cfg, prep.store.as_ref())?;
    let d_v = feature_dim(&cfg, prep.store.as_ref())?;
    let mut model = Seq2Seq::<f32>::new(cfg.model.model_config(rows, 0.0), cfg.model.kind, d_v, 0)?;
    model.store.load(&ckpt.params)?;

    let sources: Vec<String> = read_text(req.input)?.lines().map(str::to_string).collect();
    let fids: Vec<String> = match req.feature_ids {
        Some(p) => read_text(p)?.lines().map(|l| l.trim().to_string()).collect(),
        None if cfg.model.kind == ModelKind::GatedFusion && cfg.fusion.features == FeatureSource::Store => {
            return Err(MmtError::Config("store features need --feature-ids for translation".into()))
        }
        None => vec![String::new(); sources.len()],
    };
    if fids.len() != sources.len() {
        return Err(MmtError::Data(format!("{} feature ids for {} input lines", fids.len(), sources.len())));
    }
    let lc = cfg.data.lowercase;
    let corpus = ParallelCorpus {
        split: Split::Test,
        pairs: sources
            .iter()
            .zip(fids)
            .map(|(s, f)| {
                let s = normalize(s, lc);
                let source = if cfg.data.mask_grounded { mask_sentence(&s, &prep.grounded).tokens.join(" ") } else { s };
                SentencePair {
                    source,
                    target: String::new(),
                    feature_id: f,
                }
            })
            .collect(),
    };
    let pairs: Vec<EncodedPair> = corpus
        .pairs
        .iter()
        .map(|p| EncodedPair::new(prep.vocab.encode(&prep.bpe.apply(&p.source)), Vec::new()))
        .collect();
    let retrieved = match (cfg.model.kind, cfg.fusion.features) {
        (ModelKind::Rmmt, FeatureSource::Store) => {
            let store = store.expect("checked above");
            let mut params = retriever_params(&cfg, prep.vocab.len(), store)?;
            params.store.load(&Checkpoint::load(&run_dir.retriever())?.params)?;
            Some(retrieve_all(&params, &pairs, store, cfg.fusion.retrieval_k, cfg.retriever.max_len)?)
        }
        _ => None,
    };
    let n = pairs.len();
    let data = split_data(&cfg, &corpus, pairs, vec![String::new(); n], store, retrieved.as_deref(), d_v)?;
    let beam = req.beam.unwrap_or(cfg.training.beam);
    if beam == 0 {
        return Err(MmtError::Config("beam size must be at least 1".into()));
    }
    let hyps: Vec<String> = translate_split(&model, &data, beam, cfg.training.max_len_margin)?
        .iter()
        .map(|ids| ids_to_text(&prep.vocab, ids))
        .collect();
    write_file(req.output, lines(&hyps))?;
    Ok(n)
}

#[derive(Debug, Clone)]
pub struct RetrieveReport {
    pub pretrain_losses: Vec<f64>,
    /// `(split, K, recall)` for the validation and test splits.
    pub recall: Vec<(Split, usize, f64)>,
}

/// Pretrains the retriever, reports recall@{1,5,10} and writes the top-K
/// ids of every sentence.
pub fn cmd_retrieve(cfg: &ExperimentConfig, out: &Path) -> Result<RetrieveReport> {
    let run_dir = RunDir(out.to_path_buf());
    write_file(&run_dir.config(), cfg.resolved())?;
    let prep = Prepared::load(cfg)?;
    let loaded;
    let store = match (&prep.store, cfg.store_path()) {
        (Some(s), _) => s,
        (None, Some(p)) => {
            loaded = FeatureStore::load(&p)?;
            &loaded
        }
        (None, None) => return Err(MmtError::Config("retrieval needs data.feature_store or data.synthetic".into())),
    };
    let encoded: Vec<(Vec<EncodedPair>, Vec<String>)> =
        Split::ALL.iter().map(|&s| prep.encode(cfg, s)).collect::<Result<_>>()?;
    let (params, losses) = pretrain(cfg, prep.vocab.len(), &encoded[0].0, &prep.corpora[0], store)?;
    Checkpoint::from_store(&params.store, cfg.hash(), 0, losses.last().copied().unwrap_or(f64::NAN))
        .save(&run_dir.retriever())?;
    let max_len = cfg.retriever.max_len;
    let mut recall = Vec::new();
    let mut csv = String::from("split,k,recall\n");
    for split in [Split::Valid, Split::Test] {
        let (pairs, _) = &encoded[split as usize];
        let queries: Vec<(Vec<usize>, String)> = pairs
            .iter()
            .zip(&prep.corpora[split as usize].pairs)
            .map(|(p, s)| (retrieval_query(p, max_len), s.feature_id.clone()))
            .collect();
        for k in [1, 5, 10].into_iter().filter(|&k| k <= store.len()) {
            let r = recall_at_k(&queries, store, &params, k)?;
            csv.push_str(&format!("{split},{k},{r}\n"));
            recall.push((split, k, r));
        }
    }
    write_file(&run_dir.file("recall.csv"), csv)?;
    let k = cfg.fusion.retrieval_k.min(store.len());
    for split in Split::ALL {
        let ids = retrieve_all(&params, &encoded[split as usize].0, store, k, max_len)?;
        let rows: Vec<String> = ids.iter().map(|r| r.join(" ")).collect();
        write_file(&run_dir.file(&format!("retrieved.{split}.txt")), lines(&rows))?;
    }
    Ok(RetrieveReport {
        pretrain_losses: losses,
        recall,
    })
}
