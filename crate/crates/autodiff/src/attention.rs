//! Fused multi-head scaled dot-product attention kernels.
//!
//! Activations are laid out as `[batch * len, heads * head_dim]` row-major
//! matrices; head `h` of sequence `b` is the strided sub-block starting at
//! row `b * len`, column `h * head_dim`. Masked keys get probability exactly
//! zero and are skipped in the normalizer, so appending masked keys never
//! changes the surviving probabilities.

use crate::error::{AutodiffError, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Number of valid (non-pad) keys per sequence; keys at or beyond this
    /// index are masked.
    pub key_lens: Vec<usize>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttentionSpec {
    pub fn validate(&self, q_shape: &[usize], k_shape: &[usize], v_shape: &[usize]) -> Result<usize> {
        let shape_err = |lhs: &[usize], rhs: &[usize]| AutodiffError::Shape {
            op: "attention",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if q_shape.len() != 2 || k_shape.len() != 2 || v_shape.len() != 2 {
            return Err(shape_err(q_shape, k_shape));
        }
        let width = q_shape[1];
        if k_shape != v_shape || k_shape[1] != width {
            return Err(shape_err(k_shape, v_shape));
        }
        if q_shape[0] != self.batch * self.q_len || k_shape[0] != self.batch * self.k_len {
            return Err(shape_err(q_shape, k_shape));
        }
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(AutodiffError::Config(format!(
                "width {width} not divisible by {} heads",
                self.heads
            )));
        }
        if self.key_lens.len() != self.batch
            || self.key_lens.iter().any(|&l| l == 0 || l > self.k_len)
        {
            return Err(AutodiffError::Config(format!(
                "key lengths {:?} invalid for key length {}",
                self.key_lens, self.k_len
            )));
        }
        Ok(width / self.heads)
    }

    fn visible(&self, b: usize, i: usize) -> usize {
        let n = self.key_lens[b];
        if self.causal {
            n.min(i + 1)
        } else {
            n
        }
    }
}

/// Returns `(output, probabilities)`; probabilities are cached for backward
/// as `[batch, heads, q_len, k_len]`.
pub(crate) fn forward<T: Real>(
    spec: &AttentionSpec,
    head_dim: usize,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let width = spec.heads * head_dim;
    let (tq, tk) = (spec.q_len, spec.k_len);
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let mut out = vec![T::zero(); spec.batch * tq * width];
    let mut probs = vec![T::zero(); spec.batch * spec.heads * tq * tk];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let qo = b * tq * width + h * head_dim;
            let ko = b * tk * width + h * head_dim;
            let po = (b * spec.heads + h) * tq * tk;
            let p = &mut probs[po..po + tq * tk];
            T::gemm(
                tq, head_dim, tk, scale, q, qo, width, 1, k, ko, 1, width, T::zero(), p, 0, tk, 1,
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let n = spec.visible(b, i);
                let max = row[..n].iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row[..n].iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in row[..n].iter_mut() {
                    *x /= total;
                }
                for x in row[n..].iter_mut() {
                    *x = T::zero();
                }
            }
            T::gemm(
                tq, tk, head_dim, T::one(), p, 0, tk, 1, v, ko, width, 1, T::zero(), &mut out, qo,
                width, 1,
            );
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads<'g, T> {
    pub dq: Option<&'g mut [T]>,
    pub dk: Option<&'g mut [T]>,
    pub dv: Option<&'g mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    spec: &AttentionSpec,
    head_dim: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    grads: AttentionGrads<'_, T>,
) {
    let AttentionGrads { mut dq, mut dk, mut dv } = grads;
    let width = spec.heads * head_dim;
    let (tq, tk) = (spec.q_len, spec.k_len);
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let mut dp = vec![T::zero(); tq * tk];
    for b in 0..spec.batch {
        for h in 0..spec.heads {
            let qo = b * tq * width + h * head_dim;
            let ko = b * tk * width + h * head_dim;
            let po = (b * spec.heads + h) * tq * tk;
            let p = &probs[po..po + tq * tk];
            if let Some(dv) = dv.as_deref_mut() {
                // dV += Pᵀ·dO
                T::gemm(
                    tk, tq, head_dim, T::one(), p, 0, 1, tk, dout, qo, width, 1, T::one(), dv, ko,
                    width, 1,
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO·Vᵀ
            T::gemm(
                tq, head_dim, tk, T::one(), dout, qo, width, 1, v, ko, 1, width, T::zero(),
                &mut dp, 0, tk, 1,
            );
            for i in 0..tq {
                let prow = &p[i * tk..(i + 1) * tk];
                let drow = &mut dp[i * tk..(i + 1) * tk];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                T::gemm(
                    tq, tk, head_dim, scale, &dp, 0, tk, 1, k, ko, width, 1, T::one(), dq, qo,
                    width, 1,
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                T::gemm(
                    tk, tq, head_dim, scale, &dp, 0, 1, tk, q, qo, width, 1, T::one(), dk, ko,
                    width, 1,
                );
            }
        }
    }
}
