use serde::{Deserialize, Serialize};

/// Linear warmup from `init` to `peak`, then inverse square-root decay
/// anchored so the two pieces meet at `warmup_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub init: f64,
    pub peak: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 2000,
            init: 1e-7,
            peak: 0.005,
        }
    }
}

impl LrSchedule {
    pub fn lr_at_step(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak / (step.max(1) as f64).sqrt();
        }
        let w = self.warmup_steps as f64;
        if step <= self.warmup_steps {
            self.init + (self.peak - self.init) * step as f64 / w
        } else {
            self.peak * (w / step as f64).sqrt()
        }
    }
}
