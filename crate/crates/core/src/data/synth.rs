//! Synthetic grounded parallel corpus.
//!
//! Source sentences mix English stopwords, a small set of frequent content
//! words and many rare words (each used at most `rare_max_count` times, so
//! never grounded). The target is a word-by-word bijective mapping of the
//! source. Every sentence owns one image whose feature vector is a class
//! prototype plus Gaussian noise.
//!
//! In `text_insufficient` mode an extra slot is inserted per sentence: the
//! source shows the mask symbol and the target shows the word of the image
//! class, so that token can only be recovered from the feature.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::corpus::{ParallelCorpus, SentencePair, Split};
use super::grounded::Stopwords;
use super::vocab::MASK_SYMBOL;
use crate::error::{MmtError, Result};
use crate::retriever::FeatureStore;
use mmt_autodiff::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    TextSufficient,
    TextInsufficient,
}

impl std::str::FromStr for SynthMode {
    type Err = MmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_sufficient" => Ok(SynthMode::TextSufficient),
            "text_insufficient" => Ok(SynthMode::TextInsufficient),
            other => Err(MmtError::Config(format!("unknown synthetic mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub n: usize,
    pub seed: u64,
    pub classes: usize,
    pub d_v: usize,
    /// Standard deviation of the noise added to the class prototype.
    pub feature_noise: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub n_stopwords: usize,
    pub n_common: usize,
    /// Token shares of stopwords, frequent words and rare words.
    pub mix: [f64; 3],
    pub rare_max_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mode: SynthMode::TextSufficient,
            n: 6000,
            seed: 0,
            classes: 8,
            d_v: 64,
            feature_noise: 0.5,
            len_min: 6,
            len_max: 10,
            n_stopwords: 12,
            n_common: 40,
            mix: [0.35, 0.45, 0.20],
            rare_max_count: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: ParallelCorpus,
    pub store: FeatureStore,
    /// Latent image class per pair.
    pub classes: Vec<usize>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const STOPWORDS: [&str; 12] = ["a", "the", "on", "in", "with", "of", "and", "at", "is", "to", "an", "are"];

/// Deterministic pseudo-word inventory shared by every seed.
struct Lexicon {
    stop: Vec<String>,
    common: Vec<String>,
    class: Vec<String>,
    rare: Vec<String>,
}

fn pseudo_words(count: usize, skip: &Stopwords) -> Vec<String> {
    let syl: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let n = syl.len();
    (0..)
        .map(|k: usize| match k / (n * n) {
            0 => format!("{}{}", syl[k / n], syl[k % n]),
            r => format!("{}{}{}", syl[(r - 1) % n], syl[(k / n) % n], syl[k % n]),
        })
        .filter(|w| !skip.contains(w))
        .take(count)
        .collect()
}

impl Lexicon {
    fn new(cfg: &SynthConfig, n_rare: usize) -> Self {
        let mut words = pseudo_words(cfg.n_common + cfg.classes + n_rare, &Stopwords::english()).into_iter();
        Self {
            stop: STOPWORDS.iter().take(cfg.n_stopwords).map(|s| s.to_string()).collect(),
            common: words.by_ref().take(cfg.n_common).collect(),
            class: words.by_ref().take(cfg.classes).collect(),
            rare: words.collect(),
        }
    }
}

/// Target-side form of a source word: its reversal (injective, so the
/// word-level mapping is a bijection).
pub fn translate_word(word: &str) -> String {
    word.chars().rev().collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MmtError::Config(format!("synthetic corpus: {m}")));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if self.classes == 0 || self.d_v == 0 {
            return bad("classes and d_v must be positive");
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return bad("need 1 <= len_min <= len_max");
        }
        if self.n_stopwords == 0 || self.n_stopwords > STOPWORDS.len() || self.n_common == 0 {
            return bad(&format!("n_stopwords must be in 1..={} and n_common positive", STOPWORDS.len()));
        }
        if self.mix.iter().any(|&m| !(0.0..=1.0).contains(&m)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mix must be three probabilities summing to 1");
        }
        if self.rare_max_count == 0 || !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return bad("rare_max_count must be positive and feature_noise non-negative");
        }
        Ok(())
    }
}

/// Generates `cfg.n` pairs and their feature store; bit-identical per seed.
pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let lengths: Vec<usize> = (0..cfg.n).map(|_| rng.gen_range(cfg.len_min..=cfg.len_max)).collect();
    let total: usize = lengths.iter().sum();
    // Enough rare words that each is used about two thirds of its cap.
    let rare_tokens = (total as f64 * cfg.mix[2]).ceil() as usize;
    let per_word = (cfg.rare_max_count * 2).div_ceil(3);
    let lex = Lexicon::new(cfg, rare_tokens.div_ceil(per_word).max(1));
    let mut deck: Vec<usize> = (0..lex.rare.len()).flat_map(|w| std::iter::repeat_n(w, cfg.rare_max_count)).collect();

    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.d_v).map(|_| proto_rng.sample(StandardNormal)).collect())
        .collect();
    // Zero-mean across classes, so no direction of the feature space is
    // constant over images.
    if cfg.classes > 1 {
        for j in 0..cfg.d_v {
            let mean = prototypes.iter().map(|p| p[j]).sum::<f64>() / cfg.classes as f64;
            prototypes.iter_mut().for_each(|p| p[j] -= mean);
        }
    }

    let mut pairs = Vec::with_capacity(cfg.n);
    let mut classes = Vec::with_capacity(cfg.n);
    let mut ids = Vec::with_capacity(cfg.n);
    let mut data = Vec::with_capacity(cfg.n * cfg.d_v);
    for (i, &len) in lengths.iter().enumerate() {
        let mut src: Vec<String> = Vec::with_capacity(len + 1);
        for _ in 0..len {
            let u: f64 = rng.gen();
            let word = if u < cfg.mix[0] {
                &lex.stop[rng.gen_range(0..lex.stop.len())]
            } else if u < cfg.mix[0] + cfg.mix[1] || deck.is_empty() {
                &lex.common[rng.gen_range(0..lex.common.len())]
            } else {
                &lex.rare[deck.swap_remove(rng.gen_range(0..deck.len()))]
            };
            src.push(word.clone());
        }
        let class = rng.gen_range(0..cfg.classes);
        let mut tgt: Vec<String> = src.iter().map(|w| translate_word(w)).collect();
        if cfg.mode == SynthMode::TextInsufficient {
            let slot = rng.gen_range(0..=len);
            src.insert(slot, MASK_SYMBOL.to_string());
            tgt.insert(slot, translate_word(&lex.class[class]));
        }
        let id = format!("img{i:06}");
        for &p in &prototypes[class] {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((p + cfg.feature_noise * noise) as f32);
        }
        pairs.push(SentencePair {
            source: src.join(" "),
            target: tgt.join(" "),
            feature_id: id.clone(),
        });
        ids.push(id);
        classes.push(class);
    }
    Ok(SynthCorpus {
        corpus: ParallelCorpus {
            split: Split::Train,
            pairs,
        },
        store: FeatureStore::new(ids, cfg.d_v, data)?,
        classes,
    })
}

/// Source words of the frequent-word inventory used by `cfg`.
pub fn common_words(cfg: &SynthConfig) -> HashSet<String> {
    Lexicon::new(cfg, 0).common.into_iter().collect()
}
