//! Gated fusion of textual and visual representations.
//!
//! With `H_text` the encoder output (`T×d`) and `e` a projected image
//! embedding (`d`):
//!
//! ```text
//! e = W_z · feature
//! Λ = sigmoid(W_Λ e ⊕ H_text U_Λ)      (W_Λ e broadcast over the T rows)
//! H = H_text + Λ ⊙ e                   (e broadcast over the T rows)
//! ```
//!
//! The retrieval variant replaces `e` by the column-wise max over the `K`
//! projected embeddings of the retrieved images. All graph functions work on
//! batches laid out as `[B*T, d]` text rows and `[B, d]` (or `[B*K, d_v]`)
//! visual rows.

use mmt_autodiff::{rng::derive_seed, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MmtError, Result};
use crate::params::{scaled_uniform, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTag {
    File,
    Noise,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeature {
    pub vector: Vec<f32>,
    pub tag: FeatureTag,
}

impl VisualFeature {
    pub fn new(vector: Vec<f32>, tag: FeatureTag) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) {
            return Err(MmtError::Data("visual feature must be non-empty and finite".into()));
        }
        Ok(Self { vector, tag })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Stacks features into a `[n, d_v]` tensor.
pub fn feature_matrix<T: Real>(features: &[&VisualFeature]) -> Result<Tensor<T>> {
    let d = features
        .first()
        .ok_or_else(|| MmtError::Data("empty feature set".into()))?
        .dim();
    if features.iter().any(|f| f.dim() != d) {
        return Err(MmtError::Data("features of differing dimension".into()));
    }
    let data = features
        .iter()
        .flat_map(|f| f.vector.iter().map(|&x| T::of(x as f64)))
        .collect();
    Ok(Tensor::new(vec![features.len(), d], data)?)
}

/// Standard normal feature, the uninformative stand-in for a real image.
pub fn sample_noise_feature(rng: &mut impl Rng, d_v: usize) -> VisualFeature {
    let vector = (0..d_v).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    VisualFeature {
        vector,
        tag: FeatureTag::Noise,
    }
}

/// Frozen noise feature for `(sentence, slot)`: the same vector every time it
/// is requested under `seed`.
pub fn frozen_noise_feature(seed: u64, sentence: u64, slot: u64, d_v: usize) -> VisualFeature {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, sentence), slot));
    sample_noise_feature(&mut rng, d_v)
}

/// How the gating matrix is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    Learned,
    /// Every entry of Λ forced to this constant.
    Fixed(f64),
}

/// Parameter handles for `W_z`, `W_Λ`, `U_Λ`.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub w_z: ParamId,
    pub w_gate: ParamId,
    pub u_gate: ParamId,
    pub d_v: usize,
    pub d_model: usize,
}

impl FusionParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d_v: usize, d_model: usize) -> Self {
        Self {
            w_z: store.insert("fusion.w_z", scaled_uniform(rng, d_v, d_model)),
            w_gate: store.insert("fusion.w_gate", scaled_uniform(rng, d_model, d_model)),
            u_gate: store.insert("fusion.u_gate", scaled_uniform(rng, d_model, d_model)),
            d_v,
            d_model,
        }
    }

    /// `[n, d_v] -> [n, d_model]`.
    pub fn project_image<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, features: Var) -> Result<Var> {
        if g.value(features).cols() != self.d_v {
            return Err(MmtError::Data(format!(
                "feature dimension {} does not match d_v {}",
                g.value(features).cols(),
                self.d_v
            )));
        }
        let w = p.var(g, self.w_z);
        Ok(g.matmul(features, w)?)
    }

    /// Λ for `[B*T, d]` text rows and `[B, d]` image embeddings.
    pub fn compute_gate<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        h_text: Var,
        img: Var,
        seq_len: usize,
        mode: GateMode,
    ) -> Result<Var> {
        check_broadcast(g, h_text, img, seq_len)?;
        match mode {
            GateMode::Fixed(value) => Ok(g.constant(Tensor::filled(g.shape(h_text), T::of(value)))),
            GateMode::Learned => {
                let wg = p.var(g, self.w_gate);
                let ug = p.var(g, self.u_gate);
                let from_img = g.matmul(img, wg)?;
                let from_img = g.repeat_rows(from_img, seq_len)?;
                let from_text = g.matmul(h_text, ug)?;
                let pre = g.add(from_img, from_text)?;
                Ok(g.sigmoid(pre))
            }
        }
    }

    /// Single-image fusion: returns `(H, Λ)`.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse_single<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        h_text: Var,
        features: Var,
        seq_len: usize,
        mode: GateMode,
    ) -> Result<(Var, Var)> {
        let img = self.project_image(g, p, features)?;
        let gate = self.compute_gate(g, p, h_text, img, seq_len, mode)?;
        Ok((gated_fuse(g, h_text, img, gate, seq_len)?, gate))
    }

    /// Retrieval fusion over `K` images per sentence: `features` is
    /// `[B*K, d_v]`, pooled column-wise per sentence before gating.
    #[allow(clippy::too_many_arguments)]
    pub fn rmmt_fuse<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        h_text: Var,
        features: Var,
        per_sentence: usize,
        seq_len: usize,
        mode: GateMode,
    ) -> Result<(Var, Var)> {
        if per_sentence == 0 {
            return Err(MmtError::Data("retrieval fusion needs at least one image".into()));
        }
        let projected = self.project_image(g, p, features)?;
        let pooled = g.max_pool_groups(projected, per_sentence)?;
        let gate = self.compute_gate(g, p, h_text, pooled, seq_len, mode)?;
        Ok((gated_fuse(g, h_text, pooled, gate, seq_len)?, gate))
    }
}

fn check_broadcast<T: Real>(g: &Graph<'_, T>, h_text: Var, img: Var, seq_len: usize) -> Result<()> {
    let (h, e) = (g.shape(h_text), g.shape(img));
    if h.len() != 2 || e.len() != 2 || h[1] != e[1] || seq_len == 0 || h[0] != e[0] * seq_len {
        return Err(MmtError::Data(format!(
            "cannot broadcast image rows {e:?} over text rows {h:?} with length {seq_len}"
        )));
    }
    Ok(())
}

/// `H = H_text + Λ ⊙ broadcast(img)`.
pub fn gated_fuse<T: Real>(g: &mut Graph<'_, T>, h_text: Var, img: Var, gate: Var, seq_len: usize) -> Result<Var> {
    check_broadcast(g, h_text, img, seq_len)?;
    let img = g.repeat_rows(img, seq_len)?;
    let gated = g.mul(gate, img)?;
    Ok(g.add(h_text, gated)?)
}

/// Gating matrix of one sentence, rows restricted to its real tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub sentence_id: String,
    pub epoch: usize,
    /// Number of token rows.
    pub t: usize,
    pub d: usize,
    /// Row-major `t × d` entries.
    pub lambda: Vec<f64>,
}

impl GateRecord {
    pub fn new(sentence_id: impl Into<String>, epoch: usize, t: usize, d: usize, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != t * d || t == 0 || d == 0 {
            return Err(MmtError::Data(format!(
                "gate record holds {} entries, expected {t}×{d}",
                lambda.len()
            )));
        }
        if lambda.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(MmtError::Data("gate entries must lie in [0, 1]".into()));
        }
        Ok(Self {
            sentence_id: sentence_id.into(),
            epoch,
            t,
            d,
            lambda,
        })
    }

    pub fn sum(&self) -> f64 {
        self.lambda.iter().sum()
    }

    pub fn count_above(&self, tau: f64) -> usize {
        self.lambda.iter().filter(|&&x| x > tau).count()
    }
}

/// Splits a batched `[B*T, d]` gate into per-sentence records over the first
/// `lens[b]` rows of each block.
pub fn split_gate_records<T: Real>(
    gate: &Tensor<T>,
    seq_len: usize,
    lens: &[usize],
    ids: &[String],
    epoch: usize,
) -> Result<Vec<GateRecord>> {
    let d = gate.cols();
    lens.iter()
        .zip(ids)
        .enumerate()
        .map(|(b, (&len, id))| {
            let rows = &gate.data()[b * seq_len * d..(b * seq_len + len) * d];
            GateRecord::new(id.clone(), epoch, len, d, rows.iter().map(|x| x.as_f64()).collect())
        })
        .collect()
}
