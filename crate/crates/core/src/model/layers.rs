use mmt_autodiff::{AttentionSpec, Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{scaled_uniform, Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(&format!("{name}.w"), scaled_uniform(rng, fan_in, fan_out));
        let bias = bias.then(|| store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = p.var(g, b);
                Ok(g.add_row(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(&format!("{name}.g"), Tensor::filled(&[d], T::one())),
            bias: store.insert(&format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'a, T: Real>(&self, g: &mut Graph<'a, T>, p: &mut Bound<'a, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (p.var(g, self.gain), p.var(g, self.bias));
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Shape bookkeeping for one attention call.
#[derive(Debug, Clone)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true),
            out: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            heads,
        }
    }

    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        query: Var,
        memory: Var,
        shape: &AttnShape,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, memory)?;
        let v = self.v.forward(g, p, memory)?;
        let spec = AttentionSpec {
            batch: shape.batch,
            heads: self.heads,
            q_len: shape.q_len,
            k_len: shape.k_len,
            key_lens: shape.key_lens.clone(),
            causal: shape.causal,
        };
        let a = g.attention(q, k, v, spec)?;
        self.out.forward(g, p, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, d_ffn: usize) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.1"), d, d_ffn, true),
            outer: Linear::new(store, rng, &format!("{name}.2"), d_ffn, d, true),
        }
    }

    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        p: &mut Bound<'a, T>,
        x: Var,
        dropout: f64,
        training: bool,
    ) -> Result<Var> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout, training)?;
        self.outer.forward(g, p, h)
    }
}

/// Sinusoidal position table `[max_len, d]`.
pub fn sinusoidal_table<T: Real>(max_len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::of(angle.sin());
            data[pos * d + 2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::new(vec![max_len, d], data).expect("positive extents")
}
