use mmt_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MmtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply decay directly to the weights instead of adding it to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

/// Moment buffers, one pair per parameter in store order. Moments are kept in
/// 64-bit regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Real>(cfg: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`. Parameters
    /// without a gradient see a zero gradient (so decay still applies).
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(MmtError::Data(format!(
                "optimizer tracks {} parameters, got {} tensors and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            decoupled,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.numel() {
                return Err(MmtError::Data(format!("moment buffer {i} does not match its parameter")));
            }
            let grad = grads[i].as_deref();
            if grad.is_some_and(|g| g.len() != m.len()) {
                return Err(MmtError::Data(format!("gradient {i} does not match its parameter")));
            }
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let x = w.as_f64();
                let mut g = grad.map_or(0.0, |g| g[j].as_f64());
                if !decoupled {
                    g += weight_decay * x;
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                let mut next = x - lr * update;
                if decoupled {
                    next -= lr * weight_decay * x;
                }
                *w = T::of(next);
            }
        }
        Ok(())
    }
}
