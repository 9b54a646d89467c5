use std::path::Path;

use mmt_autodiff::{Real, Tensor};

use crate::error::{MmtError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

/// Named 32-bit parameters plus the epoch, validation loss and the hash of
/// the resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, config_hash: u64, epoch: usize, val_loss: f64) -> Self {
        Self {
            config_hash,
            epoch,
            val_loss,
            params: store.iter().map(|(n, t)| (n.to_string(), t.cast())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MmtError::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MmtError::Data(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let epoch = r.u64()? as usize;
        let val_loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| MmtError::Data("checkpoint parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(MmtError::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_hash,
            epoch,
            val_loss,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| MmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| MmtError::io(path, e))?)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MmtError::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Elementwise mean of parameters; metadata is taken from the last
/// checkpoint. The mean is accumulated in 64-bit.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts
        .last()
        .ok_or_else(|| MmtError::Data("no checkpoints to average".into()))?;
    let n = ckpts.len() as f64;
    let mut params = Vec::with_capacity(last.params.len());
    for (i, (name, t)) in last.params.iter().enumerate() {
        let mut acc = vec![0.0f64; t.numel()];
        for c in ckpts {
            let (other, u) = c
                .params
                .get(i)
                .filter(|_| c.params.len() == last.params.len())
                .ok_or_else(|| MmtError::Data("checkpoints hold different parameter sets".into()))?;
            if other != name || u.shape() != t.shape() {
                return Err(MmtError::Data(format!(
                    "checkpoint mismatch at {name}: found {other} {:?}, expected {:?}",
                    u.shape(),
                    t.shape()
                )));
            }
            for (a, &x) in acc.iter_mut().zip(u.data()) {
                *a += x as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        params.push((name.clone(), Tensor::new(t.shape().to_vec(), data)?));
    }
    Ok(Checkpoint {
        config_hash: last.config_hash,
        epoch: last.epoch,
        val_loss: last.val_loss,
        params,
    })
}
