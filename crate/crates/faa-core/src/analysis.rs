//! Post-training analysis: per-channel gate activation reports, the
//! ablation-variant grammar, parameter-budget matching for the baseline
//! adapter, and the canonical config hash used to key comparable runs.

use serde::{Deserialize, Serialize};

use crate::adapter::{AblationFlags, BaselineAdapterParams, FaaConfig, FaaLayerParams};
use crate::data::Dataset;
use crate::rng::{fnv1a, StreamRng};
use crate::tape::Tape;
use crate::training::{train, TrainConfig, TrainError, TrainReport};
use crate::transformer::{AdapterKind, EncoderConfig, ForwardMode, Model};

// ── Frequency report ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub layer: usize,
    /// Mean gate activation per frequency channel over tokens and samples.
    pub mean_gates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub num_grids: usize,
    pub samples: usize,
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for g in 0..self.num_grids {
            out.push_str(&format!(",grid_{g}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.layer.to_string());
            for v in &row.mean_gates {
                out.push_str(&format!(",{v:.12}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Sum in a value-sorted order so the result is identical for any
/// permutation of the inputs.
fn order_independent_mean(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean gate activation per layer and channel over a sample set, dropout
/// off. The reduction is independent of sample order.
pub fn frequency_report(
    model: &Model,
    samples: &[crate::data::Sample],
    t: usize,
) -> FrequencyReport {
    assert!(!samples.is_empty(), "frequency report needs at least one sample");
    let n = model.faa.num_grids;
    // per_layer[layer index][channel] = per-sample token means.
    let mut per_layer: std::collections::BTreeMap<usize, Vec<Vec<f64>>> =
        std::collections::BTreeMap::new();
    for s in samples {
        let mut tape = Tape::new();
        let nodes = model.leaf(&mut tape);
        let fwd = model.forward_sample(&mut tape, &nodes, &s.x, t, &mut ForwardMode::Eval);
        for (layer, g) in fwd.gates_by_layer {
            let (rows, cols) = tape.shape(g);
            let data = tape.data(g);
            let channels = per_layer.entry(layer).or_insert_with(|| vec![Vec::new(); cols]);
            for c in 0..cols {
                let mean = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
                channels[c].push(mean);
            }
        }
    }
    let rows = per_layer
        .into_iter()
        .map(|(layer, mut channels)| FrequencyRow {
            layer,
            mean_gates: channels.iter_mut().map(|c| order_independent_mean(c)).collect(),
        })
        .collect();
    FrequencyReport { num_grids: n, samples: samples.len(), rows }
}

// ── Budget matching ──────────────────────────────────────────────────────

fn trainable_numel_faa_layer(cfg: &FaaConfig) -> usize {
    let probe = FaaLayerParams::init(cfg, &StreamRng::new(0, "budget.probe"));
    let mut n = 0;
    probe.visit(&mut |_, t| {
        if t.requires_grad {
            n += t.numel();
        }
    });
    n
}

fn trainable_numel_baseline_layer(d_model: usize, width: usize) -> usize {
    let probe = BaselineAdapterParams::init(d_model, width, &StreamRng::new(0, "budget.probe"));
    let mut n = 0;
    probe.visit(&mut |_, t| {
        if t.requires_grad {
            n += t.numel();
        }
    });
    n
}

/// Bottleneck width for the plain adapter whose trainable parameter count
/// is closest to one Fourier adapter layer's (ties break toward the
/// smaller width).
pub fn matched_baseline_width(cfg: &FaaConfig) -> usize {
    let target = trainable_numel_faa_layer(cfg);
    let mut best = 1;
    let mut best_gap = usize::MAX;
    let mut width = 1;
    loop {
        let count = trainable_numel_baseline_layer(cfg.d_model, width);
        let gap = count.abs_diff(target);
        if gap < best_gap {
            best = width;
            best_gap = gap;
        }
        if count >= target {
            return best;
        }
        width += 1;
    }
}

// ── Ablation variants ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Full method, no changes.
    Original,
    /// Plain GELU bottleneck adapter at a matched parameter budget.
    RemoveFreqActivation,
    /// Fusion weights pinned to 1 and frozen.
    RemoveAdaptiveWeighting,
    /// Random Fourier projections become trainable.
    UnfreezeRff,
    /// Gates pinned to 1 and both penalty weights zeroed.
    RemoveGatingL1,
    /// Channel-count sweep point.
    NumGrids(usize),
}

pub const SWEEP_GRID_COUNTS: [usize; 6] = [1, 3, 5, 7, 9, 11];

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Original => "original".into(),
            Variant::RemoveFreqActivation => "remove_freq_activation".into(),
            Variant::RemoveAdaptiveWeighting => "remove_adaptive_weighting".into(),
            Variant::UnfreezeRff => "unfreeze_rff".into(),
            Variant::RemoveGatingL1 => "remove_gating_l1".into(),
            Variant::NumGrids(k) => format!("num_grids={k}"),
        }
    }

    pub fn parse(text: &str) -> Result<Variant, String> {
        match text {
            "original" => Ok(Variant::Original),
            "remove_freq_activation" => Ok(Variant::RemoveFreqActivation),
            "remove_adaptive_weighting" => Ok(Variant::RemoveAdaptiveWeighting),
            "unfreeze_rff" => Ok(Variant::UnfreezeRff),
            "remove_gating_l1" => Ok(Variant::RemoveGatingL1),
            other => match other.strip_prefix("num_grids=") {
                Some(k) => {
                    let k: usize = k
                        .parse()
                        .map_err(|_| format!("num_grids wants an integer, got {other:?}"))?;
                    if k == 0 {
                        return Err("num_grids must be at least 1".into());
                    }
                    Ok(Variant::NumGrids(k))
                }
                None => Err(format!(
                    "unknown ablation variant {other:?}; expected one of original, \
                     remove_freq_activation, remove_adaptive_weighting, unfreeze_rff, \
                     remove_gating_l1, num_grids=<k>"
                )),
            },
        }
    }

    /// The standard study: the full method, the four structural ablations,
    /// and the channel-count sweep.
    pub fn default_study() -> Vec<Variant> {
        let mut v = vec![
            Variant::Original,
            Variant::RemoveFreqActivation,
            Variant::RemoveAdaptiveWeighting,
            Variant::UnfreezeRff,
            Variant::RemoveGatingL1,
        ];
        v.extend(SWEEP_GRID_COUNTS.iter().map(|&k| Variant::NumGrids(k)));
        v
    }

    /// Applies the variant to a base configuration, keeping the seed and
    /// everything else untouched.
    pub fn apply(&self, base: &FaaConfig) -> (FaaConfig, AdapterKind) {
        let mut cfg = base.clone();
        let mut kind = AdapterKind::Faa;
        match self {
            Variant::Original => {}
            Variant::RemoveFreqActivation => {
                kind = AdapterKind::Baseline { width: matched_baseline_width(base) };
            }
            Variant::RemoveAdaptiveWeighting => {
                cfg.ablation = AblationFlags { fixed_fusion_weights: true, ..cfg.ablation };
            }
            Variant::UnfreezeRff => {
                cfg.ablation = AblationFlags { unfreeze_rff: true, ..cfg.ablation };
            }
            Variant::RemoveGatingL1 => {
                cfg.ablation = AblationFlags { pinned_gate: Some(1.0), ..cfg.ablation };
                cfg.lambda1 = 0.0;
                cfg.lambda2 = 0.0;
            }
            Variant::NumGrids(k) => {
                cfg.num_grids = *k;
            }
        }
        (cfg, kind)
    }
}

// ── Ablation study ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub eval_accuracy: f64,
    pub mean_gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub rows: Vec<AblationRun>,
}

impl AblationStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,seed,trainable_params,total_params,steps,final_train_loss,eval_accuracy,mean_gate\n",
        );
        for r in &self.rows {
            let gate = r.mean_gate.map(|g| format!("{g:.12}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{:.12},{:.12},{}\n",
                r.variant,
                r.seed,
                r.trainable_params,
                r.total_params,
                r.steps,
                r.final_train_loss,
                r.eval_accuracy,
                gate
            ));
        }
        out
    }

    /// Median eval accuracy across the seeds of one variant.
    pub fn median_accuracy(&self, variant: &str) -> Option<f64> {
        let mut accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.eval_accuracy)
            .collect();
        if accs.is_empty() {
            return None;
        }
        accs.sort_by(|a, b| a.total_cmp(b));
        let mid = accs.len() / 2;
        Some(if accs.len() % 2 == 1 { accs[mid] } else { (accs[mid - 1] + accs[mid]) / 2.0 })
    }
}

/// Trains one variant from scratch and summarizes the run.
pub fn run_ablation(
    variant: Variant,
    base: &FaaConfig,
    encoder: &EncoderConfig,
    data: &Dataset,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(AblationRun, TrainReport, Model), TrainError> {
    let (mut faa, kind) = variant.apply(base);
    faa.seed = seed;
    let mut model =
        Model::init(faa, encoder.clone(), kind).map_err(TrainError::Config)?;
    let report = train(&mut model, data, train_cfg, seed)?;
    let last_gate = report.epochs.last().and_then(|e| e.mean_gate);
    let row = AblationRun {
        variant: variant.name(),
        seed,
        trainable_params: model.trainable_param_count(),
        total_params: model.param_count(),
        steps: report.steps,
        final_train_loss: report.final_train_loss,
        eval_accuracy: report.final_eval_accuracy,
        mean_gate: last_gate,
    };
    Ok((row, report, model))
}

/// Runs every variant for every seed, in the given order.
pub fn ablation_study(
    variants: &[Variant],
    seeds: &[u64],
    base: &FaaConfig,
    encoder: &EncoderConfig,
    data: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<AblationStudy, TrainError> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let (row, _, _) = run_ablation(variant, base, encoder, data, train_cfg, seed)?;
            rows.push(row);
        }
    }
    Ok(AblationStudy { rows })
}

// ── Config hashing ───────────────────────────────────────────────────────

/// Hash of the canonical JSON form of any serializable configuration.
/// Reports carry it so that only runs with identical configuration are
/// compared against each other.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("configurations serialize");
    format!("{:016x}", fnv1a(json.as_bytes()))
}
