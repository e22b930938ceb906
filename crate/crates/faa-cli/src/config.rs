//! TOML run configuration.
//!
//! One file describes a whole run: the frozen encoder, the adapter stack,
//! the synthetic task, and the training hyperparameters. A single top-level
//! `seed` feeds model initialization, data generation, and training, so a
//! config file plus the binary is a complete recipe for a byte-reproducible
//! run. Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use faa_core::adapter::{AblationFlags, FaaConfig, FaaMode};
use faa_core::data::TaskConfig;
use faa_core::training::TrainConfig;
use faa_core::transformer::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Reserved switch; rejected when enabled.
    pub conditional_gamma: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { n_blocks: 4, n_heads: 2, d_ff: 128, conditional_gamma: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub d_model: usize,
    pub r: usize,
    pub d_rff: usize,
    pub sigma: f64,
    pub num_grids: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub insertion_layers: Vec<usize>,
    pub mode: FaaMode,
    pub ablation: AblationFlags,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let toy = FaaConfig::toy();
        AdapterSection {
            d_model: toy.d_model,
            r: toy.r,
            d_rff: toy.d_rff,
            sigma: toy.sigma,
            num_grids: toy.num_grids,
            lambda1: toy.lambda1,
            lambda2: toy.lambda2,
            insertion_layers: toy.insertion_layers,
            mode: toy.mode,
            ablation: toy.ablation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub t: usize,
    pub n_classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise_std: f64,
    pub waves_per_sample: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskConfig::default();
        TaskSection {
            t: t.t,
            n_classes: t.n_classes,
            train_samples: t.train_samples,
            eval_samples: t.eval_samples,
            noise_std: t.noise_std,
            waves_per_sample: t.waves_per_sample,
        }
    }
}

/// The full run configuration as written in TOML. The feature width
/// `adapter.d_model` and the class count `task.n_classes` are each stated
/// once and shared with the encoder and the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub task: TaskSection,
    pub train: TrainConfig,
}

/// Fully validated core configs derived from one [`RunConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub faa: FaaConfig,
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    pub fn resolve(&self) -> Result<Resolved, String> {
        let a = &self.adapter;
        let faa = FaaConfig {
            d_model: a.d_model,
            r: a.r,
            d_rff: a.d_rff,
            sigma: a.sigma,
            num_grids: a.num_grids,
            lambda1: a.lambda1,
            lambda2: a.lambda2,
            insertion_layers: a.insertion_layers.clone(),
            mode: a.mode,
            ablation: a.ablation.clone(),
            seed: self.seed,
        };
        let encoder = EncoderConfig {
            n_blocks: self.model.n_blocks,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            n_classes: self.task.n_classes,
            conditional_gamma: self.model.conditional_gamma,
        };
        let task = TaskConfig {
            t: self.task.t,
            d_model: a.d_model,
            n_classes: self.task.n_classes,
            train_samples: self.task.train_samples,
            eval_samples: self.task.eval_samples,
            noise_std: self.task.noise_std,
            waves_per_sample: self.task.waves_per_sample,
        };
        faa.validate()?;
        encoder.validate(faa.d_model)?;
        for &l in &faa.insertion_layers {
            if l >= encoder.n_blocks {
                return Err(format!(
                    "insertion layer {l} out of range for {} blocks",
                    encoder.n_blocks
                ));
            }
        }
        task.validate()?;
        self.train.validate()?;
        Ok(Resolved { faa, encoder, task, train: self.train.clone(), seed: self.seed })
    }
}
