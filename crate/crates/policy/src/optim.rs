//! Decoupled-weight-decay Adam and the warmup-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for a fixed list of parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub t: u64,
}

/// One parameter slot handed to [`AdamW::step`].
pub struct Slot<'a> {
    pub param: &'a mut [f64],
    pub grad: &'a [f64],
    pub decay: bool,
    /// Frozen slots are left untouched, moments included.
    pub active: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, slots: Vec<Slot<'_>>, lr: f64) {
        assert_eq!(slots.len(), self.m.len(), "slot count");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((s, m), v) in slots.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if !s.active {
                continue;
            }
            assert_eq!(s.param.len(), m.len(), "slot size");
            let decay = if s.decay { 1.0 - lr * c.weight_decay } else { 1.0 };
            for i in 0..m.len() {
                let g = s.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                s.param[i] = s.param[i] * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `ceil(warmup_ratio · total)` steps,
/// then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, peak: f64) -> f64 {
    let total = total.max(1);
    let warmup = ((warmup_ratio * total as f64).ceil() as usize).min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let frac = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
}
