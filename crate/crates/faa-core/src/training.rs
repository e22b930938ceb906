//! Deterministic mini-batch training for the adapter parameters and the
//! classifier head, plus whole-model gradient checking against finite
//! differences.
//!
//! Every stochastic choice (shuffling, dropout) draws from a labeled
//! substream keyed by seed, epoch, and step, so a run is a pure function
//! of `(model, dataset, config, seed)` and two identical runs produce
//! bit-identical parameters and reports.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::gradcheck::{check_groups, FiniteDiffError, GroupCheck};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::regularizer::{freq_regularizer, RegWeights};
use crate::rng::StreamRng;
use crate::tape::{clip_global_norm, GradMap, NodeId, Tape};
use crate::transformer::{apply_freeze, partition_params, ForwardMode, Model};

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for adapter parameters.
    pub lr_faa: f64,
    /// Learning rate for the classifier head.
    pub lr_head: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub dropout: f64,
    /// Weight on the classification loss. The frequency penalty always
    /// enters with weight 1, so 0 isolates the regularizer.
    pub task_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            lr_faa: 3e-3,
            lr_head: 3e-3,
            warmup_ratio: 0.06,
            weight_decay: 0.01,
            clip_norm: 1.0,
            dropout: 0.1,
            task_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err("epochs and batch_size must be at least 1".into());
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr_faa) || !positive(self.lr_head) {
            return Err(format!(
                "learning rates must be positive, got lr_faa={}, lr_head={}",
                self.lr_faa, self.lr_head
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(format!("warmup_ratio must lie in [0, 1], got {}", self.warmup_ratio));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.task_loss_weight.is_finite() || self.task_loss_weight < 0.0 {
            return Err(format!(
                "task_loss_weight must be finite and non-negative, got {}",
                self.task_loss_weight
            ));
        }
        Ok(())
    }
}

// ── Errors and reports ───────────────────────────────────────────────────

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    /// The total loss left the finite range; the step index points at the
    /// first offending update.
    NonFiniteLoss { step: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "invalid training setup: {msg}"),
            TrainError::NonFiniteLoss { step } => {
                write!(f, "loss became non-finite at step {step}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_task_loss: f64,
    pub mean_penalty: f64,
    /// Accuracy of the argmax prediction during the (dropout-affected)
    /// training forward passes.
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Mean gate activation across all gated layers, or `None` when the
    /// model has no gated adapters.
    pub mean_gate: Option<f64>,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
    pub final_train_loss: f64,
    pub final_eval_accuracy: f64,
    /// Per-epoch mean gate activation; empty for ungated models.
    pub gate_trace: Vec<f64>,
}

// ── Shared forward/loss assembly ─────────────────────────────────────────

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct BatchGraph {
    loss: NodeId,
    task: NodeId,
    penalty: NodeId,
    gate_nodes: Vec<NodeId>,
    correct: usize,
}

/// How a batch turns into a scalar loss: sequence length, penalty weights,
/// and the weight on the classification term.
#[derive(Debug, Clone, Copy)]
struct LossTerms {
    t: usize,
    reg: RegWeights,
    task_weight: f64,
}

/// Builds mean cross-entropy plus the gate penalty for one batch on the
/// given tape. Matches the training loss exactly when `mode` is `Eval`
/// and dropout is disabled.
fn build_batch_loss(
    tape: &mut Tape,
    model: &Model,
    nodes: &crate::transformer::ModelNodes,
    samples: &[&Sample],
    terms: LossTerms,
    mode: &mut ForwardMode,
) -> BatchGraph {
    assert!(!samples.is_empty(), "batch must contain at least one sample");
    let mut ce_sum: Option<NodeId> = None;
    let mut correct = 0;
    let mut gates_by_layer: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for s in samples {
        let fwd = model.forward_sample(tape, nodes, &s.x, terms.t, mode);
        if argmax(tape.data(fwd.logits)) == s.label {
            correct += 1;
        }
        let ce = tape.cross_entropy(fwd.logits, &[s.label]);
        ce_sum = Some(match ce_sum {
            None => ce,
            Some(acc) => tape.add(acc, ce),
        });
        for (layer, g) in fwd.gates_by_layer {
            gates_by_layer.entry(layer).or_default().push(g);
        }
    }
    let task = tape.scale(ce_sum.expect("non-empty batch"), 1.0 / samples.len() as f64);
    let layer_gates: Vec<Vec<NodeId>> = gates_by_layer.values().cloned().collect();
    let gate_nodes: Vec<NodeId> = layer_gates.iter().flatten().copied().collect();
    let penalty = freq_regularizer(tape, &layer_gates, terms.reg);
    let weighted =
        if terms.task_weight == 1.0 { task } else { tape.scale(task, terms.task_weight) };
    let loss = tape.add(weighted, penalty);
    BatchGraph { loss, task, penalty, gate_nodes, correct }
}

fn mean_gate_value(tape: &Tape, gate_nodes: &[NodeId]) -> Option<f64> {
    if gate_nodes.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for &g in gate_nodes {
        let data = tape.data(g);
        sum += data.iter().sum::<f64>();
        count += data.len();
    }
    Some(sum / count as f64)
}

/// Eval-mode loss of a batch; used by the finite-difference oracle.
pub fn batch_loss(
    model: &Model,
    batch: &[Sample],
    t: usize,
    reg: RegWeights,
    task_weight: f64,
) -> f64 {
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut tape = Tape::new();
    let nodes = model.leaf(&mut tape);
    let terms = LossTerms { t, reg, task_weight };
    let graph = build_batch_loss(&mut tape, model, &nodes, &refs, terms, &mut ForwardMode::Eval);
    tape.value(graph.loss)
}

/// Eval-mode loss and analytic gradients of a batch, restricted to the
/// trainable partition.
pub fn batch_grads(
    model: &Model,
    batch: &[Sample],
    t: usize,
    reg: RegWeights,
    task_weight: f64,
) -> (f64, GradMap) {
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut tape = Tape::new();
    let nodes = model.leaf(&mut tape);
    let terms = LossTerms { t, reg, task_weight };
    let graph = build_batch_loss(&mut tape, model, &nodes, &refs, terms, &mut ForwardMode::Eval);
    let loss = tape.value(graph.loss);
    tape.backward(graph.loss);
    let mut grads = model.collect_grads(&tape, &nodes);
    let partition = partition_params(model);
    apply_freeze(&mut grads, &partition);
    (loss, grads)
}

/// Checks the analytic gradient of every trainable parameter group against
/// central finite differences of the batch loss. `corrupt` perturbs the
/// named group's analytic gradient first, as a self-test that the check can
/// actually fail; the name must be trainable.
pub fn gradcheck_model(
    model: &Model,
    batch: &[Sample],
    t: usize,
    reg: RegWeights,
    h: f64,
    corrupt: Option<&str>,
) -> Result<Vec<GroupCheck>, FiniteDiffError> {
    let values = model.trainable_values();
    let (_, mut analytic) = batch_grads(model, batch, t, reg, 1.0);
    if let Some(name) = corrupt {
        let len = values
            .get(name)
            .unwrap_or_else(|| panic!("corrupt target {name} is not a trainable parameter"))
            .len();
        let slot = analytic.entry(name.to_string()).or_insert_with(|| vec![0.0; len]);
        for v in slot.iter_mut() {
            *v += 0.05;
        }
    }
    let base = model.clone();
    check_groups(
        &values,
        &analytic,
        |name, vals| {
            let mut probe = base.clone();
            probe.set_param(name, vals);
            batch_loss(&probe, batch, t, reg, 1.0)
        },
        h,
    )
}

/// Argmax accuracy over a sample set, dropout off.
pub fn evaluate_accuracy(model: &Model, samples: &[Sample], t: usize) -> f64 {
    assert!(!samples.is_empty(), "cannot evaluate on an empty sample set");
    let correct = samples
        .iter()
        .filter(|s| argmax(&model.predict(&s.x, t)) == s.label)
        .count();
    correct as f64 / samples.len() as f64
}

// ── Training loop ────────────────────────────────────────────────────────

pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if data.cfg.d_model != model.faa.d_model {
        return Err(TrainError::Config(format!(
            "dataset feature width {} does not match model width {}",
            data.cfg.d_model, model.faa.d_model
        )));
    }
    if data.cfg.n_classes != model.encoder.n_classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes but the head expects {}",
            data.cfg.n_classes, model.encoder.n_classes
        )));
    }

    let partition = partition_params(model);
    let reg = RegWeights::new(model.faa.lambda1, model.faa.lambda2);
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (total_steps as f64 * cfg.warmup_ratio).round() as usize;
    let schedule = Schedule::WarmupLinear { warmup_steps, total_steps };
    let clip_limit = if cfg.clip_norm == 0.0 { f64::INFINITY } else { cfg.clip_norm };
    let mut opt =
        AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let shuffle_root = StreamRng::new(seed, "train.shuffle");
    let dropout_root = StreamRng::new(seed, "train.dropout");

    let mut report = TrainReport {
        steps: 0,
        epochs: Vec::with_capacity(cfg.epochs),
        final_train_loss: f64::NAN,
        final_eval_accuracy: f64::NAN,
        gate_trace: Vec::new(),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = shuffle_root.derive(&format!("epoch.{epoch}"));
        erng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut task_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut gate_sum = 0.0;
        let mut gate_steps = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let nodes = model.leaf(&mut tape);
            let mut drng = dropout_root.derive(&format!("step.{step}"));
            let mut mode = ForwardMode::Train { dropout: cfg.dropout, rng: &mut drng };
            let terms =
                LossTerms { t: data.cfg.t, reg, task_weight: cfg.task_loss_weight };
            let graph = build_batch_loss(&mut tape, model, &nodes, &samples, terms, &mut mode);
            let loss_val = tape.value(graph.loss);
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            loss_sum += loss_val;
            task_sum += tape.value(graph.task);
            penalty_sum += tape.value(graph.penalty);
            correct += graph.correct;
            if let Some(g) = mean_gate_value(&tape, &graph.gate_nodes) {
                gate_sum += g;
                gate_steps += 1;
            }

            tape.backward(graph.loss);
            let mut grads = model.collect_grads(&tape, &nodes);
            apply_freeze(&mut grads, &partition);
            norm_sum += clip_global_norm(&mut grads, clip_limit);
            let lr_mult = schedule.multiplier(step);
            model.visit_mut(&mut |name, tensor| {
                if let Some(g) = grads.get(&name) {
                    let base_lr =
                        if name.starts_with("head.") { cfg.lr_head } else { cfg.lr_faa };
                    opt.update(&name, &mut tensor.data, g, base_lr * lr_mult);
                }
            });
            step += 1;
        }

        let batches = steps_per_epoch as f64;
        let mean_gate = (gate_steps > 0).then(|| gate_sum / gate_steps as f64);
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / batches,
            mean_task_loss: task_sum / batches,
            mean_penalty: penalty_sum / batches,
            train_accuracy: correct as f64 / n as f64,
            eval_accuracy: evaluate_accuracy(model, &data.eval, data.cfg.t),
            mean_gate,
            mean_grad_norm: norm_sum / batches,
        };
        if let Some(g) = mean_gate {
            report.gate_trace.push(g);
        }
        report.epochs.push(stats);
    }
    report.steps = step;
    let last = report.epochs.last().expect("at least one epoch");
    report.final_train_loss = last.mean_loss;
    report.final_eval_accuracy = last.eval_accuracy;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AblationFlags, FaaConfig, FaaMode};
    use crate::data::{make_synthetic_task, TaskConfig};
    use crate::transformer::{AdapterKind, EncoderConfig, ParamGroup};

    fn tiny_faa(insertion: Vec<usize>) -> FaaConfig {
        FaaConfig {
            d_model: 8,
            r: 4,
            d_rff: 4,
            sigma: 1.0,
            num_grids: 2,
            lambda1: 1e-3,
            lambda2: 1e-3,
            insertion_layers: insertion,
            mode: FaaMode::Gated,
            ablation: AblationFlags::default(),
            seed: 11,
        }
    }

    fn tiny_encoder(n_blocks: usize) -> EncoderConfig {
        EncoderConfig { n_blocks, n_heads: 2, d_ff: 16, n_classes: 2, conditional_gamma: false }
    }

    fn tiny_task(train: usize, eval: usize, seed: u64) -> crate::data::Dataset {
        let cfg = TaskConfig {
            t: 8,
            d_model: 8,
            n_classes: 2,
            train_samples: train,
            eval_samples: eval,
            noise_std: 0.05,
            waves_per_sample: 1,
        };
        make_synthetic_task(&cfg, seed).unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr_faa: 3e-3,
            lr_head: 1e-2,
            dropout: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_the_synthetic_task() {
        let mut model =
            Model::init(tiny_faa(vec![0, 1]), tiny_encoder(2), AdapterKind::Faa).unwrap();
        let data = tiny_task(32, 16, 5);
        let report = train(&mut model, &data, &tiny_train_cfg(), 0).unwrap();
        assert_eq!(report.steps, 12);
        assert_eq!(report.epochs.len(), 3);
        let first = report.epochs.first().unwrap().mean_loss;
        let last = report.final_train_loss;
        assert!(last < first, "loss went from {first} to {last}");
        assert!(report.gate_trace.len() == 3, "gated model records a gate trace");
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let data = tiny_task(24, 8, 9);
        let cfg = TrainConfig { dropout: 0.1, ..tiny_train_cfg() };
        let run = |seed: u64| {
            let mut model =
                Model::init(tiny_faa(vec![1]), tiny_encoder(2), AdapterKind::Faa).unwrap();
            let report = train(&mut model, &data, &cfg, seed).unwrap();
            (model.trainable_values(), report)
        };
        let (params_a, report_a) = run(4);
        let (params_b, report_b) = run(4);
        assert_eq!(params_a, params_b);
        assert_eq!(
            serde_json::to_string(&report_a).unwrap(),
            serde_json::to_string(&report_b).unwrap()
        );
        let (params_c, _) = run(5);
        assert_ne!(params_a, params_c, "different seeds should diverge");
    }

    #[test]
    fn frozen_backbone_is_bitwise_unchanged_by_training() {
        let mut model =
            Model::init(tiny_faa(vec![0]), tiny_encoder(2), AdapterKind::Faa).unwrap();
        let mut before: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        model.visit(&mut |name, t| {
            before.insert(name, t.data.iter().map(|x| x.to_bits()).collect());
        });
        let data = tiny_task(16, 8, 2);
        train(&mut model, &data, &tiny_train_cfg(), 1).unwrap();
        let mut frozen_moved = Vec::new();
        let mut trainable_moved = 0usize;
        model.visit(&mut |name, t| {
            let bits: Vec<u64> = t.data.iter().map(|x| x.to_bits()).collect();
            let changed = before[&name] != bits;
            match crate::transformer::Partition::group_of(&name) {
                ParamGroup::Base => {
                    if changed {
                        frozen_moved.push(name.clone());
                    }
                }
                ParamGroup::Faa => {
                    if changed {
                        assert!(t.requires_grad, "frozen adapter field {name} moved");
                        trainable_moved += 1;
                    }
                }
            }
        });
        assert!(frozen_moved.is_empty(), "backbone moved: {frozen_moved:?}");
        assert!(trainable_moved > 0, "no adapter parameter moved at all");
    }

    #[test]
    fn non_finite_loss_is_reported_with_its_step() {
        let mut model =
            Model::init(tiny_faa(vec![0]), tiny_encoder(1), AdapterKind::Faa).unwrap();
        model.set_param("head.b", &[f64::NAN, 0.0]);
        let data = tiny_task(8, 4, 3);
        let err = train(&mut model, &data, &tiny_train_cfg(), 0).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step } => assert_eq!(step, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences_end_to_end() {
        let model = Model::init(tiny_faa(vec![0]), tiny_encoder(1), AdapterKind::Faa).unwrap();
        let data = tiny_task(4, 4, 7);
        let reg = RegWeights::new(1e-3, 1e-3);
        let checks =
            gradcheck_model(&model, &data.train[..2], 8, reg, 1e-5, None).unwrap();
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(
                c.passes(1e-5),
                "group {} fails with max rel err {:.3e}",
                c.group,
                c.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradients_fail_the_check() {
        let model = Model::init(tiny_faa(vec![0]), tiny_encoder(1), AdapterKind::Faa).unwrap();
        let data = tiny_task(4, 4, 7);
        let reg = RegWeights::new(1e-3, 1e-3);
        let checks =
            gradcheck_model(&model, &data.train[..2], 8, reg, 1e-5, Some("head.w")).unwrap();
        let bad = checks.iter().find(|c| c.group == "head.w").unwrap();
        assert!(!bad.passes(1e-5), "corruption must be detected");
        let good = checks.iter().filter(|c| c.group != "head.w").count();
        assert!(good > 0);
    }

    #[test]
    fn pure_penalty_training_drives_gates_down() {
        let faa = FaaConfig { lambda1: 5.0, lambda2: 0.0, ..tiny_faa(vec![0]) };
        let mut model = Model::init(faa, tiny_encoder(1), AdapterKind::Faa).unwrap();
        let data = tiny_task(16, 4, 1);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr_faa: 2e-2,
            task_loss_weight: 0.0,
            dropout: 0.0,
            weight_decay: 0.0,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg, 0).unwrap();
        let trace = &report.gate_trace;
        assert_eq!(trace.len(), 4);
        assert!(
            trace.last().unwrap() < &trace[0],
            "gate means should fall: {trace:?}"
        );
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let mut model = Model::init(tiny_faa(vec![0]), tiny_encoder(1), AdapterKind::Faa).unwrap();
        let wrong = {
            let cfg = TaskConfig {
                t: 8,
                d_model: 4,
                n_classes: 2,
                train_samples: 8,
                eval_samples: 4,
                noise_std: 0.0,
                waves_per_sample: 1,
            };
            make_synthetic_task(&cfg, 0).unwrap()
        };
        let err = train(&mut model, &wrong, &tiny_train_cfg(), 0).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)), "got {err}");
    }
}
