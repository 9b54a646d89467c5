use mmt_autodiff::{Graph, Real, Var};

use crate::error::{MmtError, Result};

/// Constant target weights of the ε-smoothed distribution: `1−ε` on the gold
/// token, `ε/(V−1)` elsewhere, zero rows at padding. Normalized by the
/// number of real targets so the weighted sum is a mean.
pub fn smoothed_targets<T: Real>(targets: &[usize], vocab: usize, epsilon: f64, pad: usize) -> Result<(Vec<T>, usize)> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(MmtError::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    if vocab < 2 {
        return Err(MmtError::Config("label smoothing needs at least two classes".into()));
    }
    let count = targets.iter().filter(|&&t| t != pad).count();
    if count == 0 {
        return Err(MmtError::Data("all target positions are padding; loss is empty".into()));
    }
    let n = count as f64;
    let off = epsilon / (vocab - 1) as f64;
    let mut w = vec![T::zero(); targets.len() * vocab];
    for (i, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        if t >= vocab {
            return Err(MmtError::Data(format!("target id {t} outside vocabulary of {vocab}")));
        }
        let row = &mut w[i * vocab..(i + 1) * vocab];
        row.iter_mut().for_each(|x| *x = T::of(off / n));
        row[t] = T::of((1.0 - epsilon) / n);
    }
    Ok((w, count))
}

/// Mean label-smoothed cross-entropy over non-pad positions of `logits`
/// (`[N, V]`). Returns the scalar loss and the number of counted targets.
pub fn smoothed_cross_entropy<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    pad: usize,
) -> Result<(Var, usize)> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(MmtError::Data(format!(
            "logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let (weights, count) = smoothed_targets::<T>(targets, shape[1], epsilon, pad)?;
    let lsm = g.log_softmax_rows(logits);
    let total = g.weighted_sum(lsm, weights)?;
    Ok((g.scale(total, -T::one()), count))
}
