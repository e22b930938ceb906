//! Synthetic sequence-classification task with class-specific frequency
//! bands, plus a discrete-Fourier band splitter used to probe what the
//! trained adapters respond to.
//!
//! Inputs are `[t, d_model]` row-major sequences. Each class is assigned a
//! contiguous band of integer frequencies along the sequence axis; a sample
//! is a sum of a few sinusoids drawn from its class band, each pointing in
//! a random feature direction, plus Gaussian noise.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;

// ── Band split ───────────────────────────────────────────────────────────

fn is_low_bin(k: usize, t: usize, cutoff: usize) -> bool {
    k.min(t - k) <= cutoff
}

/// Splits a `[t, d]` sequence into low- and high-frequency parts along the
/// sequence axis with a plain O(t^2) transform per column. Bin `k` of the
/// length-`t` spectrum counts as low when its aliased frequency
/// `min(k, t-k)` is at most `cutoff`; the high part uses exactly the
/// complementary bins, so the two parts always sum back to the input.
pub fn fourier_split(x: &[f64], t: usize, d: usize, cutoff: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x.len(), t * d, "fourier_split: input length {} is not [{t}, {d}]", x.len());
    assert!(t > 0, "fourier_split: empty sequence");
    let mut low = vec![0.0; t * d];
    let mut high = vec![0.0; t * d];
    let mut re = vec![0.0; t];
    let mut im = vec![0.0; t];
    for j in 0..d {
        for k in 0..t {
            let mut sr = 0.0;
            let mut si = 0.0;
            for (n, chunk) in x.chunks_exact(d).enumerate() {
                let angle = TAU * (k * n) as f64 / t as f64;
                sr += chunk[j] * angle.cos();
                si -= chunk[j] * angle.sin();
            }
            re[k] = sr;
            im[k] = si;
        }
        for n in 0..t {
            let mut lo = 0.0;
            let mut hi = 0.0;
            for k in 0..t {
                let angle = TAU * (k * n) as f64 / t as f64;
                let term = re[k] * angle.cos() - im[k] * angle.sin();
                if is_low_bin(k, t, cutoff) {
                    lo += term;
                } else {
                    hi += term;
                }
            }
            low[n * d + j] = lo / t as f64;
            high[n * d + j] = hi / t as f64;
        }
    }
    (low, high)
}

/// Energy per aliased frequency `0..=t/2`, summed over feature columns.
pub fn sequence_spectrum(x: &[f64], t: usize, d: usize) -> Vec<f64> {
    assert_eq!(x.len(), t * d, "sequence_spectrum: input length {} is not [{t}, {d}]", x.len());
    let mut energy = vec![0.0; t / 2 + 1];
    for j in 0..d {
        for k in 0..t {
            let mut sr = 0.0;
            let mut si = 0.0;
            for (n, chunk) in x.chunks_exact(d).enumerate() {
                let angle = TAU * (k * n) as f64 / t as f64;
                sr += chunk[j] * angle.cos();
                si -= chunk[j] * angle.sin();
            }
            energy[k.min(t - k)] += sr * sr + si * si;
        }
    }
    energy
}

// ── Task generation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Sequence length.
    pub t: usize,
    pub d_model: usize,
    pub n_classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise_std: f64,
    pub waves_per_sample: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            t: 12,
            d_model: 64,
            n_classes: 2,
            train_samples: 256,
            eval_samples: 128,
            noise_std: 0.1,
            waves_per_sample: 2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.t < 4 {
            return Err(format!("sequence length must be at least 4, got {}", self.t));
        }
        if self.d_model == 0 {
            return Err("d_model must be at least 1".into());
        }
        if self.n_classes < 2 {
            return Err(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        let available = self.t / 2 - 1;
        if available < self.n_classes {
            return Err(format!(
                "sequence length {} offers {available} usable frequencies, fewer than {} classes",
                self.t, self.n_classes
            ));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err("train_samples and eval_samples must be at least 1".into());
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.waves_per_sample == 0 {
            return Err("waves_per_sample must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[t, d_model]` row-major.
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: TaskConfig,
    pub bands: Vec<(usize, usize)>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Splits the usable frequencies `1..=t/2-1` into `n_classes` contiguous,
/// near-equal, non-empty bands, returned as inclusive `(lo, hi)` pairs.
pub fn class_bands(t: usize, n_classes: usize) -> Result<Vec<(usize, usize)>, String> {
    if t < 4 || t / 2 - 1 < n_classes {
        return Err(format!(
            "cannot split frequencies of a length-{t} sequence into {n_classes} bands"
        ));
    }
    let available = t / 2 - 1;
    let mut bands = Vec::with_capacity(n_classes);
    let mut next = 1;
    for c in 0..n_classes {
        let count = available / n_classes + usize::from(c < available % n_classes);
        bands.push((next, next + count - 1));
        next += count;
    }
    Ok(bands)
}

fn generate_sample(
    root: &StreamRng,
    split: &str,
    index: usize,
    cfg: &TaskConfig,
    bands: &[(usize, usize)],
) -> Sample {
    let label = index % cfg.n_classes;
    let (lo, hi) = bands[label];
    let rng = root.derive(&format!("{split}.{index}"));
    let mut x = vec![0.0; cfg.t * cfg.d_model];
    for w in 0..cfg.waves_per_sample {
        let mut wr = rng.derive(&format!("wave.{w}"));
        let freq = lo + wr.uniform_usize(hi - lo + 1);
        let phase = wr.uniform_in(0.0, TAU);
        let amp = wr.uniform_in(0.5, 1.5);
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        let direction: Vec<f64> = (0..cfg.d_model).map(|_| wr.normal() * scale).collect();
        for n in 0..cfg.t {
            let wave = amp * (TAU * (freq * n) as f64 / cfg.t as f64 + phase).sin();
            for (j, dir) in direction.iter().enumerate() {
                x[n * cfg.d_model + j] += wave * dir;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let mut nr = rng.derive("noise");
        for v in &mut x {
            *v += nr.normal() * cfg.noise_std;
        }
    }
    Sample { x, label }
}

/// Generates a balanced train/eval dataset. Every sample is drawn from its
/// own seeded substream, so the result is independent of generation order.
pub fn make_synthetic_task(cfg: &TaskConfig, seed: u64) -> Result<Dataset, String> {
    cfg.validate()?;
    let bands = class_bands(cfg.t, cfg.n_classes)?;
    let root = StreamRng::new(seed, "data");
    let train =
        (0..cfg.train_samples).map(|i| generate_sample(&root, "train", i, cfg, &bands)).collect();
    let eval =
        (0..cfg.eval_samples).map(|i| generate_sample(&root, "eval", i, cfg, &bands)).collect();
    Ok(Dataset { cfg: cfg.clone(), bands, train, eval })
}
