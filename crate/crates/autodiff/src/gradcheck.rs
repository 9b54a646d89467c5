//! Central finite-difference gradient checking in 64-bit mode.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative error, keeping near-zero gradients from
/// amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, REL_FLOOR)
}

/// Relative error with an explicit denominator floor. Whole-model checks use
/// a larger floor because their losses carry more rounding noise per step.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff gradients of the scalar built by `build` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[ti].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][e];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
