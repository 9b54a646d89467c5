//! Byte-pair encoding with the `@@` continuation convention.
//!
//! A whitespace word is first split into pre-tokens: maximal runs of
//! alphanumeric characters and single punctuation characters. Merges never
//! cross a pre-token boundary. Every piece of a word except the last carries
//! an `@@` suffix, so joining tokens with spaces and deleting `"@@ "` restores
//! the whitespace-normalized text.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::vocab::SPECIALS;
use crate::error::{MmtError, Result};

pub const CONTINUATION: &str = "@@";
const HEADER: &str = "#mmt-bpe v1";

/// Whitespace normalization plus optional lowercasing.
pub fn normalize(text: &str, lowercase: bool) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}

/// Alphanumeric runs and single punctuation characters of one whitespace word.
pub fn pretokenize_word(word: &str) -> Vec<&str> {
    if SPECIALS.contains(&word) {
        return vec![word];
    }
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in word.char_indices() {
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else {
            if let Some(s) = start.take() {
                out.push(&word[s..i]);
            }
            out.push(&word[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&word[s..]);
    }
    out
}

fn chars(piece: &str) -> Vec<String> {
    if SPECIALS.contains(&piece) {
        return vec![piece.to_string()];
    }
    piece.chars().map(String::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Self { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Symbols of one pre-token after applying merges in rank order.
    pub fn segment(&self, piece: &str) -> Vec<String> {
        let mut syms = chars(piece);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
                    next.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = next;
        }
        syms
    }

    /// Subword tokens of a sentence (whitespace-normalized first).
    pub fn apply(&self, sentence: &str) -> Vec<String> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out = Vec::new();
        for word in sentence.split_whitespace() {
            let mut pieces = Vec::new();
            for pre in pretokenize_word(word) {
                let seg = cache.entry(pre).or_insert_with(|| self.segment(pre));
                pieces.extend(seg.iter().cloned());
            }
            let last = pieces.len() - 1;
            for (i, p) in pieces.into_iter().enumerate() {
                out.push(if i < last { format!("{p}{CONTINUATION}") } else { p });
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} merges={}\n", self.merges.len());
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header.starts_with(HEADER) {
            return Err(MmtError::Data(format!("not a BPE model file (header {header:?})")));
        }
        let merges = lines
            .enumerate()
            .map(|(i, line)| {
                let mut parts = line.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                    _ => Err(MmtError::Data(format!("malformed merge on line {}: {line:?}", i + 2))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| MmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| MmtError::io(path, e))?)
    }
}

/// Inverse of [`BpeModel::apply`].
pub fn detokenize(tokens: &[String]) -> String {
    let mut s = String::new();
    for t in tokens {
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => s.push_str(stem),
            None => {
                s.push_str(t);
                s.push(' ');
            }
        }
    }
    if s.ends_with(' ') {
        s.pop();
    }
    s
}

type Pair = (String, String);

struct Learner {
    words: Vec<(Vec<String>, usize)>,
    counts: HashMap<Pair, usize>,
    /// Word indices that may contain each pair (superset).
    where_: HashMap<Pair, BTreeSet<usize>>,
    queue: BTreeSet<(Reverse<usize>, Pair)>,
}

impl Learner {
    fn adjust(&mut self, pair: Pair, delta: isize, word: usize) {
        let count = self.counts.entry(pair.clone()).or_insert(0);
        if *count > 0 {
            self.queue.remove(&(Reverse(*count), pair.clone()));
        }
        *count = (*count as isize + delta) as usize;
        if *count > 0 {
            self.queue.insert((Reverse(*count), pair.clone()));
        }
        if delta > 0 {
            self.where_.entry(pair).or_default().insert(word);
        }
    }

    fn pairs(syms: &[String]) -> impl Iterator<Item = Pair> + '_ {
        syms.windows(2).map(|w| (w[0].clone(), w[1].clone()))
    }

    fn merge(&mut self, pair: &Pair) {
        let merged = format!("{}{}", pair.0, pair.1);
        let touched: Vec<usize> = self.where_.remove(pair).unwrap_or_default().into_iter().collect();
        for w in touched {
            let (syms, freq) = self.words[w].clone();
            if !syms.windows(2).any(|x| x[0] == pair.0 && x[1] == pair.1) {
                continue;
            }
            for p in Self::pairs(&syms) {
                self.adjust(p, -(freq as isize), w);
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    next.push(merged.clone());
                    i += 2;
                } else {
                    next.push(syms[i].clone());
                    i += 1;
                }
            }
            for p in Self::pairs(&next) {
                self.adjust(p, freq as isize, w);
            }
            self.words[w].0 = next;
        }
    }
}

/// Greedy most-frequent-pair merges over pre-token frequencies. Ties go to
/// the lexicographically smallest pair; learning stops after `n_merges` or
/// once no pair occurs at least twice.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], n_merges: usize) -> Result<BpeModel> {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for word in line.as_ref().split_whitespace() {
            for pre in pretokenize_word(word) {
                *freq.entry(pre).or_insert(0) += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(MmtError::Data("cannot learn BPE from an empty corpus".into()));
    }
    let mut types: Vec<(&str, usize)> = freq.into_iter().collect();
    types.sort_unstable();
    let mut learner = Learner {
        words: types.iter().map(|&(w, f)| (chars(w), f)).collect(),
        counts: HashMap::new(),
        where_: HashMap::new(),
        queue: BTreeSet::new(),
    };
    for w in 0..learner.words.len() {
        let (syms, f) = learner.words[w].clone();
        for p in Learner::pairs(&syms) {
            learner.adjust(p, f as isize, w);
        }
    }
    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let Some((Reverse(count), pair)) = learner.queue.first().cloned() else { break };
        if count < 2 {
            break;
        }
        learner.merge(&pair);
        merges.push(pair);
    }
    Ok(BpeModel::from_merges(merges))
}
