//! AdamW with decoupled weight decay, plus the warmup/linear-decay
//! learning-rate schedule used by the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

// ── AdamW ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Per-parameter first/second moment state keyed by parameter name.
/// Decay is decoupled from the gradient and applied on every update,
/// including when the gradient is all zeros.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    slots: BTreeMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, slots: BTreeMap::new() }
    }

    /// One update for one named parameter at the given step learning rate.
    pub fn update(&mut self, name: &str, data: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(
            data.len(),
            grad.len(),
            "optimizer update {name}: parameter length {} vs gradient length {}",
            data.len(),
            grad.len()
        );
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; data.len()],
            v: vec![0.0; data.len()],
            t: 0,
        });
        assert_eq!(slot.m.len(), data.len(), "optimizer state for {name} changed length");
        slot.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(slot.t as i32);
        let bc2 = 1.0 - beta2.powi(slot.t as i32);
        for i in 0..data.len() {
            data[i] *= 1.0 - lr * weight_decay;
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * grad[i];
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// Number of parameters with optimizer state.
    pub fn tracked(&self) -> usize {
        self.slots.len()
    }
}

// ── Learning-rate schedule ───────────────────────────────────────────────

/// Multiplier on the base learning rate as a function of the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "schedule")]
pub enum Schedule {
    Constant,
    /// Linear ramp from 1/warmup_steps up to 1 over the warmup, then linear
    /// decay to 0 at `total_steps`.
    WarmupLinear { warmup_steps: usize, total_steps: usize },
}

impl Schedule {
    pub fn multiplier(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupLinear { warmup_steps, total_steps } => {
                if warmup_steps > 0 && step < warmup_steps {
                    return (step + 1) as f64 / warmup_steps as f64;
                }
                if total_steps <= warmup_steps {
                    return 1.0;
                }
                let rest = (total_steps - warmup_steps) as f64;
                ((total_steps.saturating_sub(step)) as f64 / rest).clamp(0.0, 1.0)
            }
        }
    }
}
