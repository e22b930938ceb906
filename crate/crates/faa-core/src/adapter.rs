//! Fourier-activated adapter layers.
//!
//! A bottleneck adapter `h + W_up a(W_down h + b_down) + b_up` whose
//! activation `a` mixes two branches at the bottleneck width `d`:
//!
//! * a conventional branch `alpha (.) GELU(W_base x)`, and
//! * a Fourier branch `beta (.) P_mix z`, where `z` is either a bank of
//!   `num_grids` random-Fourier channels `g_i = cos(C_i x + b_i) ++
//!   sin(C_i x + b_i)` combined as `sum_i r_i LayerNorm(g_i)` with
//!   input-conditioned sigmoid gates `r_i` (gated mode), or a single
//!   random-Fourier feature map (simple mode).
//!
//! The random projections (`w_rff`, `b_rff`, `channel_w`, `channel_b`) are
//! sampled once and frozen; everything else in the layer trains. Ablation
//! flags swap individual mechanisms for fixed or free-parameter stand-ins
//! without touching the rest of the layer.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt;

use crate::rng::StreamRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Stabilizer used by every layer normalization in the crate.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaaMode {
    /// Frequency channels with input-conditioned gates.
    Gated,
    /// One plain random-Fourier feature map, no channels or gates.
    Simple,
}

impl fmt::Display for FaaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaaMode::Gated => write!(f, "gated"),
            FaaMode::Simple => write!(f, "simple"),
        }
    }
}

/// Mechanism switches for ablation studies. All off by default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Pin `alpha = beta = 1` (non-learnable), keeping both branches.
    pub fixed_fusion_weights: bool,
    /// Replace input-conditioned gates by one learnable vector per layer.
    pub free_gates: bool,
    /// Make the frozen random projections trainable.
    pub unfreeze_rff: bool,
    /// Replace gates by this constant (e.g. 1.0 to disable gating).
    pub pinned_gate: Option<f64>,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.fixed_fusion_weights
            || self.free_gates
            || self.unfreeze_rff
            || self.pinned_gate.is_some()
    }
}

/// Static configuration of the adapter layers inside a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaaConfig {
    /// Width of the stream the adapter is inserted into.
    pub d_model: usize,
    /// Bottleneck width; the Fourier activation operates at this width.
    pub r: usize,
    /// Random-Fourier feature count for simple mode.
    pub d_rff: usize,
    /// Bandwidth of the frozen projections: entries are N(0, 1/sigma^2).
    pub sigma: f64,
    /// Number of frequency channels in gated mode.
    pub num_grids: usize,
    /// Gate sparsity weight.
    pub lambda1: f64,
    /// Gate pairwise-orthogonality weight.
    pub lambda2: f64,
    /// Block indices that receive an adapter.
    pub insertion_layers: Vec<usize>,
    pub mode: FaaMode,
    #[serde(default)]
    pub ablation: AblationFlags,
    pub seed: u64,
}

impl FaaConfig {
    /// Desk-scale defaults; `insertion_layers` assumes a 4-block encoder.
    pub fn toy() -> Self {
        FaaConfig {
            d_model: 64,
            r: 16,
            d_rff: 32,
            sigma: 1.0,
            num_grids: 9,
            lambda1: 1e-4,
            lambda2: 1e-4,
            insertion_layers: vec![0, 1, 2, 3],
            mode: FaaMode::Gated,
            ablation: AblationFlags::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 {
            return Err("d_model must be at least 1".into());
        }
        if self.r == 0 {
            return Err("r must be at least 1".into());
        }
        if self.d_rff == 0 {
            return Err("d_rff must be at least 1".into());
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.num_grids == 0 {
            return Err("num_grids must be at least 1".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(format!(
                "regularizer weights must be non-negative, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            ));
        }
        if let Some(v) = self.ablation.pinned_gate {
            if !v.is_finite() {
                return Err(format!("pinned_gate must be finite, got {v}"));
            }
        }
        if self.ablation.free_gates && self.ablation.pinned_gate.is_some() {
            return Err("free_gates and pinned_gate are mutually exclusive".into());
        }
        Ok(())
    }
}

// ── Layer parameters ─────────────────────────────────────────────────────

/// One adapter layer's parameters. `d` below is the bottleneck width.
#[derive(Debug, Clone)]
pub struct FaaLayerParams {
    /// `[d, d_rff]`, frozen random, simple mode's feature projection.
    pub w_rff: Tensor,
    /// `[d_rff]`, frozen random phases in `[0, 2pi)`.
    pub b_rff: Tensor,
    /// `[d, d]`, base branch projection.
    pub w_base: Tensor,
    /// `[d]`, base branch weight (init 1).
    pub alpha: Tensor,
    /// `[d]`, Fourier branch weight (init 0.1).
    pub beta: Tensor,
    /// `num_grids` frozen projections `[d, d]`, one per frequency channel.
    pub channel_w: Vec<Tensor>,
    /// `num_grids` frozen phase vectors `[d]`.
    pub channel_b: Vec<Tensor>,
    /// `num_grids` gate projections `[d, d]`.
    pub gate_w: Vec<Tensor>,
    /// `num_grids` gate slopes `[1]` (init 1).
    pub gate_a: Vec<Tensor>,
    /// `num_grids` gate offsets `[1]` (init 0).
    pub gate_c: Vec<Tensor>,
    /// Free gate vector `[num_grids]`; present only under the free-gates
    /// ablation, where it replaces the gate projections entirely.
    pub free_gate: Option<Tensor>,
    /// `[d, 2d]` (gated) or `[d, 2 d_rff]` (simple): aligns the Fourier
    /// features back to the bottleneck width.
    pub p_mix: Tensor,
    /// `[r, d_model]` bottleneck down-projection.
    pub w_down: Tensor,
    /// `[d_model, r]` bottleneck up-projection.
    pub w_up: Tensor,
    /// `[r]`.
    pub b_down: Tensor,
    /// `[d_model]`.
    pub b_up: Tensor,
    /// `[d_model]`, per-coordinate strength of the adapter inside its block
    /// (init 0 so a fresh model matches the adapter-free backbone).
    pub gamma: Tensor,
}

impl FaaLayerParams {
    /// Samples a fresh layer. Each field draws from a substream labeled by
    /// its own name, so field values do not depend on construction order.
    pub fn init(cfg: &FaaConfig, rng: &StreamRng) -> Self {
        let d = cfg.r;
        let n = cfg.num_grids;
        let ab = &cfg.ablation;
        let std = 1.0 / cfg.sigma;
        let sub = |label: &str| rng.derive(label);

        let fusion_trainable = !ab.fixed_fusion_weights;
        let fusion_value = if ab.fixed_fusion_weights { 1.0 } else { 0.1 };
        let gates_active = !ab.free_gates && ab.pinned_gate.is_none();

        let mix_cols = match cfg.mode {
            FaaMode::Gated => 2 * d,
            FaaMode::Simple => 2 * cfg.d_rff,
        };

        FaaLayerParams {
            w_rff: Tensor::gaussian(vec![d, cfg.d_rff], std, &mut sub("w_rff"), ab.unfreeze_rff),
            b_rff: Tensor::uniform(vec![cfg.d_rff], 0.0, TAU, &mut sub("b_rff"), ab.unfreeze_rff),
            w_base: Tensor::xavier_uniform(vec![d, d], &mut sub("w_base"), true),
            alpha: Tensor::full(vec![d], 1.0, fusion_trainable),
            beta: Tensor::full(vec![d], fusion_value, fusion_trainable),
            channel_w: (0..n)
                .map(|i| {
                    Tensor::gaussian(vec![d, d], std, &mut sub(&format!("channel_w.{i}")), ab.unfreeze_rff)
                })
                .collect(),
            channel_b: (0..n)
                .map(|i| {
                    Tensor::uniform(vec![d], 0.0, TAU, &mut sub(&format!("channel_b.{i}")), ab.unfreeze_rff)
                })
                .collect(),
            gate_w: (0..n)
                .map(|i| {
                    Tensor::xavier_uniform(vec![d, d], &mut sub(&format!("gate_w.{i}")), gates_active)
                })
                .collect(),
            gate_a: (0..n).map(|_| Tensor::scalar(1.0, gates_active)).collect(),
            gate_c: (0..n).map(|_| Tensor::scalar(0.0, gates_active)).collect(),
            free_gate: ab
                .free_gates
                .then(|| Tensor::xavier_uniform(vec![n], &mut sub("free_gate"), true)),
            p_mix: Tensor::xavier_uniform(vec![d, mix_cols], &mut sub("p_mix"), true),
            w_down: Tensor::xavier_uniform(vec![cfg.r, cfg.d_model], &mut sub("w_down"), true),
            w_up: Tensor::xavier_uniform(vec![cfg.d_model, cfg.r], &mut sub("w_up"), true),
            b_down: Tensor::zeros(vec![cfg.r], true),
            b_up: Tensor::zeros(vec![cfg.d_model], true),
            gamma: Tensor::zeros(vec![cfg.d_model], true),
        }
    }

    pub fn num_grids(&self) -> usize {
        self.channel_w.len()
    }

    /// Visits `(relative name, tensor)` pairs in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("w_rff".into(), &self.w_rff);
        f("b_rff".into(), &self.b_rff);
        f("w_base".into(), &self.w_base);
        f("alpha".into(), &self.alpha);
        f("beta".into(), &self.beta);
        for (i, t) in self.channel_w.iter().enumerate() {
            f(format!("channel_w.{i}"), t);
        }
        for (i, t) in self.channel_b.iter().enumerate() {
            f(format!("channel_b.{i}"), t);
        }
        for (i, t) in self.gate_w.iter().enumerate() {
            f(format!("gate_w.{i}"), t);
        }
        for (i, t) in self.gate_a.iter().enumerate() {
            f(format!("gate_a.{i}"), t);
        }
        for (i, t) in self.gate_c.iter().enumerate() {
            f(format!("gate_c.{i}"), t);
        }
        if let Some(t) = &self.free_gate {
            f("free_gate".into(), t);
        }
        f("p_mix".into(), &self.p_mix);
        f("w_down".into(), &self.w_down);
        f("w_up".into(), &self.w_up);
        f("b_down".into(), &self.b_down);
        f("b_up".into(), &self.b_up);
        f("gamma".into(), &self.gamma);
    }

    /// Mutable counterpart of [`FaaLayerParams::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("w_rff".into(), &mut self.w_rff);
        f("b_rff".into(), &mut self.b_rff);
        f("w_base".into(), &mut self.w_base);
        f("alpha".into(), &mut self.alpha);
        f("beta".into(), &mut self.beta);
        for (i, t) in self.channel_w.iter_mut().enumerate() {
            f(format!("channel_w.{i}"), t);
        }
        for (i, t) in self.channel_b.iter_mut().enumerate() {
            f(format!("channel_b.{i}"), t);
        }
        for (i, t) in self.gate_w.iter_mut().enumerate() {
            f(format!("gate_w.{i}"), t);
        }
        for (i, t) in self.gate_a.iter_mut().enumerate() {
            f(format!("gate_a.{i}"), t);
        }
        for (i, t) in self.gate_c.iter_mut().enumerate() {
            f(format!("gate_c.{i}"), t);
        }
        if let Some(t) = self.free_gate.as_mut() {
            f("free_gate".into(), t);
        }
        f("p_mix".into(), &mut self.p_mix);
        f("w_down".into(), &mut self.w_down);
        f("w_up".into(), &mut self.w_up);
        f("b_down".into(), &mut self.b_down);
        f("b_up".into(), &mut self.b_up);
        f("gamma".into(), &mut self.gamma);
    }
}

/// Tape handles for one adapter layer, produced by [`leaf_layer`].
#[derive(Debug, Clone)]
pub struct FaaLayerNodes {
    pub w_rff: NodeId,
    pub b_rff: NodeId,
    pub w_base: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
    pub channel_w: Vec<NodeId>,
    pub channel_b: Vec<NodeId>,
    pub gate_w: Vec<NodeId>,
    pub gate_a: Vec<NodeId>,
    pub gate_c: Vec<NodeId>,
    pub free_gate: Option<NodeId>,
    pub p_mix: NodeId,
    pub w_down: NodeId,
    pub w_up: NodeId,
    pub b_down: NodeId,
    pub b_up: NodeId,
    pub gamma: NodeId,
}

/// Copies every layer parameter onto the tape once; reuse the returned
/// handles for all samples in a step so gradients accumulate.
pub fn leaf_layer(tape: &mut Tape, p: &FaaLayerParams) -> FaaLayerNodes {
    FaaLayerNodes {
        w_rff: tape.leaf_tensor(&p.w_rff),
        b_rff: tape.leaf_tensor(&p.b_rff),
        w_base: tape.leaf_tensor(&p.w_base),
        alpha: tape.leaf_tensor(&p.alpha),
        beta: tape.leaf_tensor(&p.beta),
        channel_w: p.channel_w.iter().map(|t| tape.leaf_tensor(t)).collect(),
        channel_b: p.channel_b.iter().map(|t| tape.leaf_tensor(t)).collect(),
        gate_w: p.gate_w.iter().map(|t| tape.leaf_tensor(t)).collect(),
        gate_a: p.gate_a.iter().map(|t| tape.leaf_tensor(t)).collect(),
        gate_c: p.gate_c.iter().map(|t| tape.leaf_tensor(t)).collect(),
        free_gate: p.free_gate.as_ref().map(|t| tape.leaf_tensor(t)),
        p_mix: tape.leaf_tensor(&p.p_mix),
        w_down: tape.leaf_tensor(&p.w_down),
        w_up: tape.leaf_tensor(&p.w_up),
        b_down: tape.leaf_tensor(&p.b_down),
        b_up: tape.leaf_tensor(&p.b_up),
        gamma: tape.leaf_tensor(&p.gamma),
    }
}

// ── Core operations ──────────────────────────────────────────────────────

/// Random-Fourier feature map
/// `z = sqrt(2 / d_rff) [cos(W^T x + b) ++ sin(W^T x + b)]`,
/// applied row-wise: `[t, d] -> [t, 2 d_rff]`.
pub fn rff_transform(tape: &mut Tape, h: NodeId, p: &FaaLayerNodes) -> NodeId {
    let (_, d) = tape.shape(h);
    let (dw, d_rff) = tape.shape(p.w_rff);
    assert_eq!(d, dw, "rff_transform: input width {d} does not match projection rows {dw}");
    let u = tape.matmul(h, p.w_rff);
    let u = tape.add_row(u, p.b_rff);
    let c = tape.cos(u);
    let s = tape.sin(u);
    let z = tape.concat_cols(c, s);
    tape.scale(z, (2.0 / d_rff as f64).sqrt())
}

/// Frequency channels `g_i = cos(C_i x + b_i) ++ sin(C_i x + b_i)`,
/// row-wise: each channel maps `[t, d] -> [t, 2d]`.
pub fn frequency_channels(tape: &mut Tape, h: NodeId, p: &FaaLayerNodes) -> Vec<NodeId> {
    let (_, d) = tape.shape(h);
    p.channel_w
        .iter()
        .zip(&p.channel_b)
        .map(|(&w, &b)| {
            let (rows, cols) = tape.shape(w);
            assert_eq!(
                (rows, cols),
                (d, d),
                "frequency_channels: projection [{rows}, {cols}] does not match width {d}"
            );
            let wt = tape.transpose(w);
            let v = tape.matmul(h, wt);
            let v = tape.add_row(v, b);
            let c = tape.cos(v);
            let s = tape.sin(v);
            tape.concat_cols(c, s)
        })
        .collect()
}

/// Input-conditioned channel gates
/// `r_i = sigmoid(a_i mean(G_i x) + c_i)`, one column per channel:
/// `[t, d] -> [t, num_grids]`, every entry in (0, 1).
///
/// Under ablation the gates become a learnable free vector broadcast over
/// rows, or a pinned constant.
pub fn channel_gates(
    tape: &mut Tape,
    h: NodeId,
    p: &FaaLayerNodes,
    ablation: &AblationFlags,
) -> NodeId {
    let (t, _) = tape.shape(h);
    let n = p.gate_w.len();
    if let Some(v) = ablation.pinned_gate {
        return tape.constant(t, n, vec![v; t * n]);
    }
    if let Some(free) = p.free_gate {
        return tape.repeat_rows(free, t);
    }
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let wt = tape.transpose(p.gate_w[i]);
        let m = tape.matmul(h, wt);
        let z = tape.mean_rows(m);
        let z = tape.mul_scalar(z, p.gate_a[i]);
        let z = tape.add_scalar(z, p.gate_c[i]);
        cols.push(tape.sigmoid(z));
    }
    let mut gates = cols[0];
    for &c in &cols[1..] {
        gates = tape.concat_cols(gates, c);
    }
    gates
}

/// Gate-weighted sum of normalized channels:
/// `z = sum_i r_i LayerNorm(g_i)`. Returns the aggregate and the individual
/// weighted contributions `r_i LayerNorm(g_i)` for analysis.
pub fn gated_aggregate(
    tape: &mut Tape,
    channels: &[NodeId],
    gates: NodeId,
) -> (NodeId, Vec<NodeId>) {
    assert!(!channels.is_empty(), "gated_aggregate: empty channel list");
    let (t, width) = tape.shape(channels[0]);
    let (tg, n) = tape.shape(gates);
    assert_eq!(
        (tg, n),
        (t, channels.len()),
        "gated_aggregate: gates [{tg}, {n}] do not match {} channels of {t} rows",
        channels.len()
    );
    let gain = tape.constant(1, width, vec![1.0; width]);
    let shift = tape.constant(1, width, vec![0.0; width]);
    let mut contribs = Vec::with_capacity(channels.len());
    let mut acc: Option<NodeId> = None;
    for (i, &g) in channels.iter().enumerate() {
        let normed = tape.layernorm(g, gain, shift, LN_EPS);
        let r = tape.slice_cols(gates, i, 1);
        let contrib = tape.scale_rows(normed, r);
        contribs.push(contrib);
        acc = Some(match acc {
            Some(a) => tape.add(a, contrib),
            None => contrib,
        });
    }
    (acc.unwrap(), contribs)
}

/// Result of one adapter forward pass.
#[derive(Debug, Clone)]
pub struct FaaForward {
    pub out: NodeId,
    /// `[t, num_grids]` gate activations; `None` in simple mode.
    pub gates: Option<NodeId>,
    /// Per-channel weighted contributions; `None` in simple mode.
    pub contribs: Option<Vec<NodeId>>,
}

/// Frequency-aware activation at the bottleneck width:
/// `alpha (.) GELU(W_base x) + beta (.) P_mix z`.
pub fn fourier_activation(
    tape: &mut Tape,
    h: NodeId,
    p: &FaaLayerNodes,
    mode: FaaMode,
    ablation: &AblationFlags,
) -> FaaForward {
    let wt = tape.transpose(p.w_base);
    let base = tape.matmul(h, wt);
    let base = tape.gelu(base);
    let base = tape.mul_row(base, p.alpha);

    let (z, gates, contribs) = match mode {
        FaaMode::Gated => {
            let channels = frequency_channels(tape, h, p);
            let gates = channel_gates(tape, h, p, ablation);
            let (z, contribs) = gated_aggregate(tape, &channels, gates);
            (z, Some(gates), Some(contribs))
        }
        FaaMode::Simple => (rff_transform(tape, h, p), None, None),
    };
    let pt = tape.transpose(p.p_mix);
    let proj = tape.matmul(z, pt);
    let fourier = tape.mul_row(proj, p.beta);
    let out = tape.add(base, fourier);
    FaaForward { out, gates, contribs }
}

/// Full adapter layer: residual bottleneck with the Fourier activation in
/// the middle. `[t, d_model] -> [t, d_model]`.
pub fn faa_adapter_forward(
    tape: &mut Tape,
    h: NodeId,
    p: &FaaLayerNodes,
    mode: FaaMode,
    ablation: &AblationFlags,
) -> FaaForward {
    let wt = tape.transpose(p.w_down);
    let down = tape.matmul(h, wt);
    let down = tape.add_row(down, p.b_down);
    let act = fourier_activation(tape, down, p, mode, ablation);
    let ut = tape.transpose(p.w_up);
    let up = tape.matmul(act.out, ut);
    let up = tape.add_row(up, p.b_up);
    let out = tape.add(h, up);
    FaaForward { out, gates: act.gates, contribs: act.contribs }
}

// ── Plain bottleneck baseline ────────────────────────────────────────────

/// Parameters of the conventional adapter used as a comparison baseline:
/// same residual bottleneck, plain GELU activation, no Fourier branch.
#[derive(Debug, Clone)]
pub struct BaselineAdapterParams {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub b_down: Tensor,
    pub b_up: Tensor,
    pub gamma: Tensor,
}

impl BaselineAdapterParams {
    pub fn init(d_model: usize, width: usize, rng: &StreamRng) -> Self {
        let sub = |label: &str| rng.derive(label);
        BaselineAdapterParams {
            w_down: Tensor::xavier_uniform(vec![width, d_model], &mut sub("w_down"), true),
            w_up: Tensor::xavier_uniform(vec![d_model, width], &mut sub("w_up"), true),
            b_down: Tensor::zeros(vec![width], true),
            b_up: Tensor::zeros(vec![d_model], true),
            gamma: Tensor::zeros(vec![d_model], true),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("w_down".into(), &self.w_down);
        f("w_up".into(), &self.w_up);
        f("b_down".into(), &self.b_down);
        f("b_up".into(), &self.b_up);
        f("gamma".into(), &self.gamma);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("w_down".into(), &mut self.w_down);
        f("w_up".into(), &mut self.w_up);
        f("b_down".into(), &mut self.b_down);
        f("b_up".into(), &mut self.b_up);
        f("gamma".into(), &mut self.gamma);
    }
}

#[derive(Debug, Clone)]
pub struct BaselineAdapterNodes {
    pub w_down: NodeId,
    pub w_up: NodeId,
    pub b_down: NodeId,
    pub b_up: NodeId,
    pub gamma: NodeId,
}

pub fn leaf_baseline(tape: &mut Tape, p: &BaselineAdapterParams) -> BaselineAdapterNodes {
    BaselineAdapterNodes {
        w_down: tape.leaf_tensor(&p.w_down),
        w_up: tape.leaf_tensor(&p.w_up),
        b_down: tape.leaf_tensor(&p.b_down),
        b_up: tape.leaf_tensor(&p.b_up),
        gamma: tape.leaf_tensor(&p.gamma),
    }
}

/// `h + W_up GELU(W_down h + b_down) + b_up`.
pub fn baseline_adapter_forward(tape: &mut Tape, h: NodeId, p: &BaselineAdapterNodes) -> NodeId {
    let wt = tape.transpose(p.w_down);
    let down = tape.matmul(h, wt);
    let down = tape.add_row(down, p.b_down);
    let act = tape.gelu(down);
    let ut = tape.transpose(p.w_up);
    let up = tape.matmul(act, ut);
    let up = tape.add_row(up, p.b_up);
    tape.add(h, up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_err};

    fn tiny_config() -> FaaConfig {
        FaaConfig {
            d_model: 6,
            r: 3,
            d_rff: 4,
            sigma: 1.0,
            num_grids: 2,
            lambda1: 1e-4,
            lambda2: 1e-4,
            insertion_layers: vec![0],
            mode: FaaMode::Gated,
            ablation: AblationFlags::default(),
            seed: 11,
        }
    }

    fn layer(cfg: &FaaConfig) -> FaaLayerParams {
        let rng = StreamRng::new(cfg.seed, "adapter.test");
        FaaLayerParams::init(cfg, &rng)
    }

    #[test]
    fn rff_with_zero_projection_has_norm_sqrt_two() {
        // W = 0, b = 0: cos half is all ones, sin half all zeros, so
        // ||z||_2 = sqrt(d_rff * 2 / d_rff) = sqrt(2) for any input.
        let cfg = FaaConfig { d_rff: 3, r: 2, ..tiny_config() };
        let mut p = layer(&cfg);
        p.w_rff = Tensor::zeros(vec![2, 3], false);
        p.b_rff = Tensor::zeros(vec![3], false);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(1, 2, vec![0.7, -1.3], false);
        let z = rff_transform(&mut tape, h, &nodes);
        let data = tape.data(z);
        let scale = (2.0f64 / 3.0).sqrt();
        for &v in &data[..3] {
            assert!((v - scale).abs() < 1e-15);
        }
        for &v in &data[3..] {
            assert!(v.abs() < 1e-15);
        }
        let norm: f64 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rff_matches_direct_evaluation() {
        let cfg = FaaConfig { r: 2, d_rff: 3, ..tiny_config() };
        let p = layer(&cfg);
        let h = [0.3, -0.9];
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let hid = tape.leaf(1, 2, h.to_vec(), false);
        let z = rff_transform(&mut tape, hid, &nodes);

        // Straight-line re-evaluation of the defining formula.
        let scale = (2.0f64 / 3.0).sqrt();
        for j in 0..3 {
            let u = h[0] * p.w_rff.data[j] + h[1] * p.w_rff.data[3 + j] + p.b_rff.data[j];
            assert!((tape.data(z)[j] - scale * u.cos()).abs() < 1e-14);
            assert!((tape.data(z)[3 + j] - scale * u.sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn channel_coordinates_lie_on_the_unit_circle() {
        let cfg = tiny_config();
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(4, 3, (0..12).map(|i| (i as f64) * 0.37 - 1.9).collect(), false);
        for g in frequency_channels(&mut tape, h, &nodes) {
            let (rows, cols) = tape.shape(g);
            assert_eq!(cols, 6);
            let data = tape.data(g);
            for row in 0..rows {
                for j in 0..3 {
                    let c = data[row * cols + j];
                    let s = data[row * cols + 3 + j];
                    assert!((c * c + s * s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gates_are_sigmoid_bounded_and_row_deterministic() {
        let cfg = tiny_config();
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        // Two identical rows must gate identically.
        let row = [0.4, -0.2, 1.1];
        let h = tape.leaf(2, 3, [row, row].concat(), false);
        let gates = channel_gates(&mut tape, h, &nodes, &cfg.ablation);
        assert_eq!(tape.shape(gates), (2, 2));
        let data = tape.data(gates);
        for &g in data {
            assert!(g > 0.0 && g < 1.0, "gate {g} out of (0, 1)");
        }
        assert_eq!(data[0], data[2]);
        assert_eq!(data[1], data[3]);
    }

    #[test]
    fn pinned_gates_are_constant() {
        let cfg = FaaConfig {
            ablation: AblationFlags { pinned_gate: Some(1.0), ..Default::default() },
            ..tiny_config()
        };
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(3, 3, vec![0.5; 9], false);
        let gates = channel_gates(&mut tape, h, &nodes, &cfg.ablation);
        assert!(tape.data(gates).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn aggregate_with_one_hot_gates_selects_a_normalized_channel() {
        let cfg = tiny_config();
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(2, 3, vec![0.3, -0.6, 0.9, 1.4, 0.0, -0.8], false);
        let channels = frequency_channels(&mut tape, h, &nodes);
        let gates = tape.constant(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let (z, contribs) = gated_aggregate(&mut tape, &channels, gates);
        // z == LayerNorm(g_0) exactly when gates are (1, 0).
        let gain = tape.constant(1, 6, vec![1.0; 6]);
        let shift = tape.constant(1, 6, vec![0.0; 6]);
        let ln0 = tape.layernorm(channels[0], gain, shift, LN_EPS);
        assert_eq!(tape.data(z), tape.data(ln0));
        // And the second contribution is identically zero.
        assert!(tape.data(contribs[1]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_with_zero_gates_is_zero() {
        let cfg = tiny_config();
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(2, 3, vec![0.2; 6], false);
        let channels = frequency_channels(&mut tape, h, &nodes);
        let gates = tape.constant(2, 2, vec![0.0; 4]);
        let (z, _) = gated_aggregate(&mut tape, &channels, gates);
        assert!(tape.data(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_beta_reduces_to_gelu_branch() {
        let cfg = tiny_config();
        let mut p = layer(&cfg);
        p.beta = Tensor::zeros(vec![3], true);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(2, 3, vec![0.8, -0.1, 0.5, -1.2, 0.4, 0.0], false);
        let act = fourier_activation(&mut tape, h, &nodes, cfg.mode, &cfg.ablation);

        let mut tape2 = Tape::new();
        let nodes2 = leaf_layer(&mut tape2, &p);
        let h2 = tape2.leaf(2, 3, vec![0.8, -0.1, 0.5, -1.2, 0.4, 0.0], false);
        let wt = tape2.transpose(nodes2.w_base);
        let mm = tape2.matmul(h2, wt);
        let ge = tape2.gelu(mm);
        let expect = tape2.mul_row(ge, nodes2.alpha);
        assert_eq!(tape.data(act.out), tape2.data(expect));
    }

    #[test]
    fn adapter_with_zero_up_projection_is_residual_plus_bias() {
        let cfg = tiny_config();
        let mut p = layer(&cfg);
        p.w_up = Tensor::zeros(vec![6, 3], true);
        p.b_up = Tensor::zeros(vec![6], true);
        let input = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, -0.6, -0.5, -0.4, -0.3, -0.2, -0.1];
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(2, 6, input.clone(), false);
        let fwd = faa_adapter_forward(&mut tape, h, &nodes, cfg.mode, &cfg.ablation);
        assert_eq!(tape.data(fwd.out), input.as_slice());
    }

    #[test]
    fn baseline_with_zero_projections_is_residual_plus_bias() {
        let rng = StreamRng::new(5, "baseline.test");
        let mut p = BaselineAdapterParams::init(4, 2, &rng);
        p.w_down = Tensor::zeros(vec![2, 4], true);
        p.w_up = Tensor::zeros(vec![4, 2], true);
        p.b_up = Tensor::new(vec![4], vec![0.5, -0.5, 0.25, 0.0], true);
        let mut tape = Tape::new();
        let nodes = leaf_baseline(&mut tape, &p);
        let h = tape.leaf(1, 4, vec![1.0, 2.0, 3.0, 4.0], false);
        let out = baseline_adapter_forward(&mut tape, h, &nodes);
        assert_eq!(tape.data(out), &[1.5, 1.5, 3.25, 4.0]);
    }

    #[test]
    fn frozen_projections_receive_no_gradient() {
        let cfg = tiny_config();
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(2, 6, (0..12).map(|i| 0.1 * i as f64).collect(), false);
        let fwd = faa_adapter_forward(&mut tape, h, &nodes, cfg.mode, &cfg.ablation);
        let loss = tape.sum_all(fwd.out);
        tape.backward(loss);
        assert!(tape.grad(nodes.w_rff).is_none());
        assert!(tape.grad(nodes.b_rff).is_none());
        for i in 0..cfg.num_grids {
            assert!(tape.grad(nodes.channel_w[i]).is_none());
            assert!(tape.grad(nodes.channel_b[i]).is_none());
        }
        assert!(tape.grad(nodes.w_base).is_some());
        assert!(tape.grad(nodes.p_mix).is_some());
    }

    #[test]
    fn unfrozen_projections_receive_gradient() {
        let cfg = FaaConfig {
            ablation: AblationFlags { unfreeze_rff: true, ..Default::default() },
            ..tiny_config()
        };
        let p = layer(&cfg);
        let mut tape = Tape::new();
        let nodes = leaf_layer(&mut tape, &p);
        let h = tape.leaf(2, 6, (0..12).map(|i| 0.1 * i as f64).collect(), false);
        let fwd = faa_adapter_forward(&mut tape, h, &nodes, cfg.mode, &cfg.ablation);
        let loss = tape.sum_all(fwd.out);
        tape.backward(loss);
        for i in 0..cfg.num_grids {
            assert!(tape.grad(nodes.channel_w[i]).is_some());
        }
    }

    /// End-to-end gradient of the adapter against finite differences, for
    /// a handful of learnable fields in both modes.
    #[test]
    fn adapter_gradients_match_finite_differences() {
        for mode in [FaaMode::Gated, FaaMode::Simple] {
            let cfg = FaaConfig { mode, ..tiny_config() };
            let p = layer(&cfg);
            let input: Vec<f64> = (0..12).map(|i| ((i * 7 % 12) as f64) * 0.17 - 1.0).collect();

            let forward = |params: &FaaLayerParams| -> (Tape, FaaLayerNodes, NodeId) {
                let mut tape = Tape::new();
                let nodes = leaf_layer(&mut tape, params);
                let h = tape.leaf(2, 6, input.clone(), false);
                let fwd = faa_adapter_forward(&mut tape, h, &nodes, cfg.mode, &cfg.ablation);
                let sq = tape.mul(fwd.out, fwd.out);
                let loss = tape.sum_all(sq);
                (tape, nodes, loss)
            };

            let (mut tape, nodes, loss) = forward(&p);
            tape.backward(loss);

            for field in ["w_base", "beta", "p_mix", "w_down", "gate_a.0", "gate_w.1"] {
                if mode == FaaMode::Simple && field.starts_with("gate") {
                    continue;
                }
                let node = match field {
                    "w_base" => nodes.w_base,
                    "beta" => nodes.beta,
                    "p_mix" => nodes.p_mix,
                    "w_down" => nodes.w_down,
                    "gate_a.0" => nodes.gate_a[0],
                    "gate_w.1" => nodes.gate_w[1],
                    _ => unreachable!(),
                };
                let analytic = tape.grad(node).unwrap().to_vec();
                let mut current = Vec::new();
                p.visit(&mut |name, t| {
                    if name == field {
                        current = t.data.clone();
                    }
                });
                let fd = finite_diff_grad(
                    |vals| {
                        let mut probe = p.clone();
                        probe.visit_mut(&mut |name, t| {
                            if name == field {
                                t.data = vals.to_vec();
                            }
                        });
                        let (t2, _, l2) = forward(&probe);
                        t2.value(l2)
                    },
                    &current,
                    1e-5,
                )
                .unwrap();
                let err = max_rel_err(&analytic, &fd);
                assert!(err <= 1e-5, "{mode} {field}: rel err {err:.3e}");
            }
        }
    }

    #[test]
    fn mode_sets_mix_projection_width() {
        let gated = layer(&tiny_config());
        assert_eq!(gated.p_mix.shape, vec![3, 6]);
        let simple = layer(&FaaConfig { mode: FaaMode::Simple, ..tiny_config() });
        assert_eq!(simple.p_mix.shape, vec![3, 8]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(FaaConfig { sigma: 0.0, ..tiny_config() }.validate().is_err());
        assert!(FaaConfig { num_grids: 0, ..tiny_config() }.validate().is_err());
        assert!(FaaConfig { lambda1: -1.0, ..tiny_config() }.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }
}
