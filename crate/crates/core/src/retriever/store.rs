use std::collections::HashMap;
use std::path::Path;

use crate::error::{MmtError, Result};
use crate::fusion::{FeatureTag, VisualFeature};

const MAGIC: &[u8; 4] = b"FSTR";
const VERSION: u32 = 1;

/// Identified feature vectors, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != ids.len() * dim {
            return Err(MmtError::Data(format!(
                "feature store of {} ids × {dim} dims cannot hold {} values",
                ids.len(),
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() || id.contains('\n') {
                return Err(MmtError::Data(format!("invalid feature id {id:?}")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(MmtError::Data(format!("duplicate feature id {id:?}")));
            }
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MmtError::Data("feature store holds non-finite values".into()));
        }
        Ok(Self { ids, dim, data, index })
    }

    pub fn from_rows(rows: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        if rows.iter().any(|r| r.1.len() != dim) {
            return Err(MmtError::Data("feature rows of differing dimension".into()));
        }
        let (ids, vecs): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Self::new(ids, dim, vecs.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.position(id)
            .map(|i| self.row(i))
            .ok_or_else(|| MmtError::Data(format!("feature id {id:?} not in store")))
    }

    pub fn feature(&self, id: &str) -> Result<VisualFeature> {
        VisualFeature::new(self.get(id)?.to_vec(), FeatureTag::File)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(id.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| MmtError::Data(format!("feature store: {what}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        if word(4) != VERSION as usize {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (n, dim) = (word(8), word(12));
        let end = n
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(4))
            .and_then(|x| x.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated matrix"))?;
        let data = bytes[16..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let text = std::str::from_utf8(&bytes[end..]).map_err(|_| bad("ids are not UTF-8"))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != n {
            return Err(bad(&format!("header says {n} rows but {} ids follow", ids.len())));
        }
        Self::new(ids, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| MmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| MmtError::io(path, e))?)
    }
}
