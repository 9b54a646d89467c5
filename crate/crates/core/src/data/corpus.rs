use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub feature_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<SentencePair>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| MmtError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| MmtError::io(path, e))
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stable identifier of pair `i`, used in gate logs.
    pub fn sentence_id(&self, i: usize) -> String {
        format!("{}-{i}", self.split)
    }

    /// Reads three line-aligned files: source, target, feature id.
    pub fn read(split: Split, source: &Path, target: &Path, features: &Path) -> Result<Self> {
        let (s, t, f) = (read_lines(source)?, read_lines(target)?, read_lines(features)?);
        if s.len() != t.len() || s.len() != f.len() {
            return Err(MmtError::Data(format!(
                "{split} files are not aligned: {} source, {} target, {} feature lines",
                s.len(),
                t.len(),
                f.len()
            )));
        }
        let pairs = s
            .into_iter()
            .zip(t)
            .zip(f)
            .map(|((source, target), feature_id)| SentencePair {
                source,
                target,
                feature_id: feature_id.trim().to_string(),
            })
            .collect();
        Ok(Self { split, pairs })
    }

    /// Writes `{stem}.src`, `{stem}.tgt`, `{stem}.fid` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let path = |ext: &str| dir.join(format!("{stem}.{ext}"));
        write_lines(&path("src"), self.pairs.iter().map(|p| p.source.as_str()))?;
        write_lines(&path("tgt"), self.pairs.iter().map(|p| p.target.as_str()))?;
        write_lines(&path("fid"), self.pairs.iter().map(|p| p.feature_id.as_str()))
    }

    pub fn read_dir(dir: &Path, split: Split) -> Result<Self> {
        let path = |ext: &str| dir.join(format!("{split}.{ext}"));
        Self::read(split, &path("src"), &path("tgt"), &path("fid"))
    }

    /// Splits off the last `valid + test` pairs as validation and test sets.
    pub fn split_off(mut self, valid: usize, test: usize) -> Result<[ParallelCorpus; 3]> {
        if valid + test >= self.pairs.len() {
            return Err(MmtError::Data(format!(
                "cannot carve {valid} valid + {test} test pairs from {}",
                self.pairs.len()
            )));
        }
        let test_pairs = self.pairs.split_off(self.pairs.len() - test);
        let valid_pairs = self.pairs.split_off(self.pairs.len() - valid);
        Ok([
            ParallelCorpus {
                split: Split::Train,
                pairs: self.pairs,
            },
            ParallelCorpus {
                split: Split::Valid,
                pairs: valid_pairs,
            },
            ParallelCorpus {
                split: Split::Test,
                pairs: test_pairs,
            },
        ])
    }
}
