//! Data preparation and loading of prepared artifacts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mmt_core::data::bpe::{detokenize, normalize};
use mmt_core::data::grounded::mask_sentence;
use mmt_core::data::prepare::{encode_pairs, joint_vocab, tokenize_corpus};
use mmt_core::data::{
    build_grounded_vocab, gen_synthetic_corpus, learn_bpe, BpeModel, EncodedPair, ParallelCorpus, Split, Stopwords,
    Vocab,
};
use mmt_core::retriever::FeatureStore;
use mmt_core::{MmtError, Result};

use crate::config::ExperimentConfig;

const BIN_MAGIC: &[u8; 4] = b"MMTB";
const BIN_VERSION: u32 = 1;

/// File layout of a work directory.
#[derive(Debug, Clone)]
pub struct WorkDir(pub PathBuf);

impl WorkDir {
    pub fn corpus_dir(&self) -> PathBuf {
        self.0.join("corpus")
    }

    pub fn bpe(&self) -> PathBuf {
        self.0.join("bpe.codes")
    }

    pub fn vocab(&self) -> PathBuf {
        self.0.join("vocab.txt")
    }

    pub fn grounded(&self) -> PathBuf {
        self.0.join("grounded.txt")
    }

    pub fn binarized(&self, split: Split) -> PathBuf {
        self.0.join(format!("{split}.bin"))
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| MmtError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| MmtError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| MmtError::io(path, e))
}

/// Ids without the end-of-sequence marker, as `u32` little-endian.
pub fn binarize(pairs: &[EncodedPair]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&BIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for p in pairs {
        for side in [&p.source, &p.target] {
            let ids = &side[..side.len() - 1];
            out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
            for &id in ids {
                out.extend_from_slice(&(id as u32).to_le_bytes());
            }
        }
    }
    out
}

pub fn debinarize(bytes: &[u8]) -> Result<Vec<EncodedPair>> {
    let bad = || MmtError::Data("malformed binarized corpus".into());
    let mut words = bytes
        .get(4..)
        .filter(|_| &bytes[..4] == BIN_MAGIC)
        .ok_or_else(bad)?
        .chunks(4)
        .map(|c| c.try_into().map(u32::from_le_bytes).map_err(|_| bad()));
    let mut next = || words.next().unwrap_or_else(|| Err(bad()));
    if next()? != BIN_VERSION {
        return Err(MmtError::Data("unsupported binarized corpus version".into()));
    }
    let n = next()? as usize;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut side = || -> Result<Vec<usize>> {
            let len = next()? as usize;
            (0..len).map(|_| next().map(|x| x as usize)).collect()
        };
        let (s, t) = (side()?, side()?);
        pairs.push(EncodedPair::new(s, t));
    }
    if next().is_ok() {
        return Err(MmtError::Data("trailing data in binarized corpus".into()));
    }
    Ok(pairs)
}

fn stopwords(cfg: &ExperimentConfig) -> Result<Stopwords> {
    match &cfg.data.stopwords {
        Some(p) => Stopwords::load(p),
        None => Ok(Stopwords::english()),
    }
}

#[derive(Debug, Clone)]
pub struct PrepareReport {
    pub sizes: [usize; 3],
    pub merges: usize,
    pub vocab_size: usize,
    pub grounded: usize,
}

/// Writes the corpus copy, BPE codes, joint vocabulary, grounded-token list
/// and binarized splits into the work directory.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareReport> {
    let work = WorkDir(cfg.data.work_dir.clone());
    let splits: [ParallelCorpus; 3] = if cfg.data.synthetic {
        let synth = gen_synthetic_corpus(&cfg.data.synth)?;
        let store = cfg.store_path().expect("synthetic runs always have a store");
        write_file(&store, synth.store.to_bytes())?;
        synth.corpus.split_off(cfg.data.valid_size, cfg.data.test_size)?
    } else {
        read_splits(&cfg.data.corpus_dir)?
    };
    let dir = work.corpus_dir();
    std::fs::create_dir_all(&dir).map_err(|e| MmtError::io(&dir, e))?;
    for c in &splits {
        c.write(&dir, c.split.name())?;
    }
    let train = &splits[0];
    let text: Vec<String> = train
        .pairs
        .iter()
        .flat_map(|p| [normalize(&p.source, cfg.data.lowercase), normalize(&p.target, cfg.data.lowercase)])
        .collect();
    let bpe = learn_bpe(&text, cfg.data.bpe_merges)?;
    bpe.save(&work.bpe())?;
    let vocab = joint_vocab(&tokenize_corpus(train, &bpe, cfg.data.lowercase));
    write_file(&work.vocab(), vocab.to_text())?;
    let sources: Vec<String> = train.pairs.iter().map(|p| normalize(&p.source, cfg.data.lowercase)).collect();
    let grounded = build_grounded_vocab(&sources, &stopwords(cfg)?, cfg.data.min_count);
    write_file(&work.grounded(), grounded.iter().map(|g| format!("{g}\n")).collect::<String>())?;
    let mut sizes = [0; 3];
    for (i, c) in splits.iter().enumerate() {
        let (pairs, _) = encode_pairs(&tokenize_corpus(c, &bpe, cfg.data.lowercase), &vocab);
        write_file(&work.binarized(c.split), binarize(&pairs))?;
        sizes[i] = c.len();
    }
    Ok(PrepareReport {
        sizes,
        merges: bpe.merges().len(),
        vocab_size: vocab.len(),
        grounded: grounded.len(),
    })
}

fn read_splits(dir: &Path) -> Result<[ParallelCorpus; 3]> {
    Ok([
        ParallelCorpus::read_dir(dir, Split::Train)?,
        ParallelCorpus::read_dir(dir, Split::Valid)?,
        ParallelCorpus::read_dir(dir, Split::Test)?,
    ])
}

/// Everything `prepare` wrote, loaded back.
pub struct Prepared {
    pub bpe: BpeModel,
    pub vocab: Vocab,
    pub grounded: BTreeSet<String>,
    pub corpora: [ParallelCorpus; 3],
    pub store: Option<FeatureStore>,
}

impl Prepared {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let work = WorkDir(cfg.data.work_dir.clone());
        let store = match cfg.store_path() {
            Some(p) if cfg.model.kind.uses_images() || p.exists() => Some(FeatureStore::load(&p)?),
            _ => None,
        };
        Ok(Self {
            bpe: BpeModel::load(&work.bpe())?,
            vocab: Vocab::from_text(&read_text(&work.vocab())?)?,
            grounded: read_text(&work.grounded())?.lines().map(str::to_string).collect(),
            corpora: read_splits(&work.corpus_dir())?,
            store,
        })
    }

    /// Encoded pairs and references of a split. Masking re-tokenizes the
    /// masked sources; otherwise the binarized split is used.
    pub fn encode(&self, cfg: &ExperimentConfig, split: Split) -> Result<(Vec<EncodedPair>, Vec<String>)> {
        let corpus = &self.corpora[split as usize];
        let lc = cfg.data.lowercase;
        if cfg.data.mask_grounded {
            let mut masked = corpus.clone();
            for p in &mut masked.pairs {
                p.source = mask_sentence(&normalize(&p.source, lc), &self.grounded).tokens.join(" ");
            }
            return Ok(encode_pairs(&tokenize_corpus(&masked, &self.bpe, lc), &self.vocab));
        }
        let work = WorkDir(cfg.data.work_dir.clone());
        let path = work.binarized(split);
        let pairs = debinarize(&std::fs::read(&path).map_err(|e| MmtError::io(&path, e))?)?;
        if pairs.len() != corpus.len() {
            return Err(MmtError::Data(format!("{} does not match the {split} corpus", path.display())));
        }
        let refs = corpus
            .pairs
            .iter()
            .map(|p| detokenize(&self.bpe.apply(&normalize(&p.target, lc))))
            .collect();
        Ok((pairs, refs))
    }
}
