//! Post-norm transformer encoder with adapters on the attention branch.
//!
//! Each block computes
//!
//! ```text
//! a     = attention(h_prev)            (+ dropout in training)
//! mid   = LN1(h_prev + a + gamma (.) adapter(a))
//! out   = LN2(mid + ffn(mid))          (dropout inside the ffn)
//! ```
//!
//! where `adapter` is the Fourier-activated layer (or the plain bottleneck
//! baseline) and `gamma` its per-coordinate strength, initialized to zero so
//! a fresh model reproduces the adapter-free backbone exactly.
//!
//! The backbone (embedding projection, attention, feed-forward, layer norms)
//! is sampled once and frozen; only adapter parameters and the classifier
//! head train. [`partition_params`] labels every tensor accordingly and
//! [`apply_freeze`] strips frozen entries from a gradient map as a final
//! guard.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    baseline_adapter_forward, faa_adapter_forward, leaf_baseline, leaf_layer, AblationFlags,
    BaselineAdapterNodes, BaselineAdapterParams, FaaConfig, FaaLayerNodes, FaaLayerParams, LN_EPS,
};
use crate::rng::StreamRng;
use crate::tape::{GradMap, NodeId, Tape};
use crate::tensor::Tensor;

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    /// Reserved: input-conditioned adapter strength. Not implemented; the
    /// configuration is rejected when set.
    #[serde(default)]
    pub conditional_gamma: bool,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        EncoderConfig { n_blocks: 4, n_heads: 2, d_ff: 128, n_classes: 2, conditional_gamma: false }
    }

    pub fn validate(&self, d_model: usize) -> Result<(), String> {
        if self.n_blocks == 0 {
            return Err("n_blocks must be at least 1".into());
        }
        if self.n_heads == 0 || !d_model.is_multiple_of(self.n_heads) {
            return Err(format!(
                "n_heads must divide d_model: d_model={d_model}, n_heads={}",
                self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return Err("d_ff must be at least 1".into());
        }
        if self.n_classes < 2 {
            return Err(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.conditional_gamma {
            return Err("conditional_gamma is reserved and not implemented".into());
        }
        Ok(())
    }
}

/// Which adapter family sits in the insertion layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AdapterKind {
    Faa,
    Baseline { width: usize },
}

// ── Parameters ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum AdapterParams {
    Faa(Box<FaaLayerParams>),
    Baseline(Box<BaselineAdapterParams>),
}

impl AdapterParams {
    pub fn gamma(&self) -> &Tensor {
        match self {
            AdapterParams::Faa(p) => &p.gamma,
            AdapterParams::Baseline(p) => &p.gamma,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            AdapterParams::Faa(p) => p.visit(f),
            AdapterParams::Baseline(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            AdapterParams::Faa(p) => p.visit_mut(f),
            AdapterParams::Baseline(p) => p.visit_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
    pub adapter: Option<AdapterParams>,
}

impl BlockParams {
    fn init(d_model: usize, d_ff: usize, rng: &StreamRng) -> Self {
        let sub = |label: &str| rng.derive(label);
        BlockParams {
            wq: Tensor::xavier_uniform(vec![d_model, d_model], &mut sub("wq"), false),
            wk: Tensor::xavier_uniform(vec![d_model, d_model], &mut sub("wk"), false),
            wv: Tensor::xavier_uniform(vec![d_model, d_model], &mut sub("wv"), false),
            wo: Tensor::xavier_uniform(vec![d_model, d_model], &mut sub("wo"), false),
            w1: Tensor::xavier_uniform(vec![d_model, d_ff], &mut sub("w1"), false),
            b1: Tensor::zeros(vec![d_ff], false),
            w2: Tensor::xavier_uniform(vec![d_ff, d_model], &mut sub("w2"), false),
            b2: Tensor::zeros(vec![d_model], false),
            ln1_gain: Tensor::full(vec![d_model], 1.0, false),
            ln1_shift: Tensor::zeros(vec![d_model], false),
            ln2_gain: Tensor::full(vec![d_model], 1.0, false),
            ln2_shift: Tensor::zeros(vec![d_model], false),
            adapter: None,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("wq".into(), &self.wq);
        f("wk".into(), &self.wk);
        f("wv".into(), &self.wv);
        f("wo".into(), &self.wo);
        f("w1".into(), &self.w1);
        f("b1".into(), &self.b1);
        f("w2".into(), &self.w2);
        f("b2".into(), &self.b2);
        f("ln1_gain".into(), &self.ln1_gain);
        f("ln1_shift".into(), &self.ln1_shift);
        f("ln2_gain".into(), &self.ln2_gain);
        f("ln2_shift".into(), &self.ln2_shift);
        if let Some(a) = &self.adapter {
            a.visit(&mut |name, t| f(format!("adapter.{name}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("wq".into(), &mut self.wq);
        f("wk".into(), &mut self.wk);
        f("wv".into(), &mut self.wv);
        f("wo".into(), &mut self.wo);
        f("w1".into(), &mut self.w1);
        f("b1".into(), &mut self.b1);
        f("w2".into(), &mut self.w2);
        f("b2".into(), &mut self.b2);
        f("ln1_gain".into(), &mut self.ln1_gain);
        f("ln1_shift".into(), &mut self.ln1_shift);
        f("ln2_gain".into(), &mut self.ln2_gain);
        f("ln2_shift".into(), &mut self.ln2_shift);
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&mut |name, t| f(format!("adapter.{name}"), t));
        }
    }
}

/// Encoder, adapters, and classifier head, with trainability baked into
/// each tensor's `requires_grad` flag.
#[derive(Debug, Clone)]
pub struct Model {
    pub faa: FaaConfig,
    pub encoder: EncoderConfig,
    pub kind: AdapterKind,
    /// Frozen `[d_model, d_model]` input projection standing in for a
    /// pretrained embedding stage; inputs here are already continuous rows.
    pub embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Model {
    pub fn init(faa: FaaConfig, encoder: EncoderConfig, kind: AdapterKind) -> Result<Model, String> {
        faa.validate()?;
        encoder.validate(faa.d_model)?;
        let mut seen = std::collections::BTreeSet::new();
        for &l in &faa.insertion_layers {
            if l >= encoder.n_blocks {
                return Err(format!(
                    "insertion layer {l} out of range for {} blocks",
                    encoder.n_blocks
                ));
            }
            if !seen.insert(l) {
                return Err(format!("insertion layer {l} listed twice"));
            }
        }
        if let AdapterKind::Baseline { width } = kind {
            if width == 0 {
                return Err("baseline adapter width must be at least 1".into());
            }
        }

        let root = StreamRng::new(faa.seed, "init");
        let d = faa.d_model;
        let mut blocks = Vec::with_capacity(encoder.n_blocks);
        for l in 0..encoder.n_blocks {
            let brng = root.derive(&format!("block.{l}"));
            let mut block = BlockParams::init(d, encoder.d_ff, &brng);
            if faa.insertion_layers.contains(&l) {
                let arng = brng.derive("adapter");
                block.adapter = Some(match kind {
                    AdapterKind::Faa => {
                        AdapterParams::Faa(Box::new(FaaLayerParams::init(&faa, &arng)))
                    }
                    AdapterKind::Baseline { width } => AdapterParams::Baseline(Box::new(
                        BaselineAdapterParams::init(d, width, &arng),
                    )),
                });
            }
            blocks.push(block);
        }
        Ok(Model {
            embed: Tensor::xavier_uniform(vec![d, d], &mut root.derive("embed"), false),
            head_w: Tensor::xavier_uniform(
                vec![d, encoder.n_classes],
                &mut root.derive("head.w"),
                true,
            ),
            head_b: Tensor::zeros(vec![encoder.n_classes], true),
            faa,
            encoder,
            kind,
            blocks,
        })
    }

    /// Same seed and backbone, no adapters anywhere.
    pub fn adapter_free_twin(&self) -> Model {
        let faa = FaaConfig { insertion_layers: Vec::new(), ..self.faa.clone() };
        Model::init(faa, self.encoder.clone(), self.kind)
            .expect("twin of a valid model is valid")
    }

    // ── Named traversal ──────────────────────────────────────────────────

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embed".into(), &self.embed);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |name, t| f(format!("block.{l}.{name}"), t));
        }
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embed".into(), &mut self.embed);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |name, t| f(format!("block.{l}.{name}"), t));
        }
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if t.requires_grad {
                n += t.numel();
            }
        });
        n
    }

    /// Values of every trainable tensor, keyed by name.
    pub fn trainable_values(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            if t.requires_grad {
                out.insert(name, t.data.clone());
            }
        });
        out
    }

    /// Replaces one named tensor's data; panics on unknown name or length
    /// mismatch.
    pub fn set_param(&mut self, name: &str, values: &[f64]) {
        let mut found = false;
        self.visit_mut(&mut |n, t| {
            if n == name {
                assert_eq!(
                    t.data.len(),
                    values.len(),
                    "set_param {name}: length {} vs {}",
                    values.len(),
                    t.data.len()
                );
                t.data = values.to_vec();
                found = true;
            }
        });
        assert!(found, "set_param: no parameter named {name}");
    }

    // ── Tape wiring ──────────────────────────────────────────────────────

    /// Copies all parameters onto a tape once per step. The returned
    /// bindings map names to node ids for gradient extraction.
    pub fn leaf(&self, tape: &mut Tape) -> ModelNodes {
        let mut bindings = Vec::new();
        let embed = tape.leaf_tensor(&self.embed);
        bindings.push(("embed".to_string(), embed));
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let nodes = BlockNodes {
                wq: tape.leaf_tensor(&b.wq),
                wk: tape.leaf_tensor(&b.wk),
                wv: tape.leaf_tensor(&b.wv),
                wo: tape.leaf_tensor(&b.wo),
                w1: tape.leaf_tensor(&b.w1),
                b1: tape.leaf_tensor(&b.b1),
                w2: tape.leaf_tensor(&b.w2),
                b2: tape.leaf_tensor(&b.b2),
                ln1_gain: tape.leaf_tensor(&b.ln1_gain),
                ln1_shift: tape.leaf_tensor(&b.ln1_shift),
                ln2_gain: tape.leaf_tensor(&b.ln2_gain),
                ln2_shift: tape.leaf_tensor(&b.ln2_shift),
                adapter: b.adapter.as_ref().map(|a| match a {
                    AdapterParams::Faa(p) => AdapterNodes::Faa(leaf_layer(tape, p)),
                    AdapterParams::Baseline(p) => AdapterNodes::Baseline(leaf_baseline(tape, p)),
                }),
            };
            let prefix = format!("block.{l}.");
            bindings.push((format!("{prefix}wq"), nodes.wq));
            bindings.push((format!("{prefix}wk"), nodes.wk));
            bindings.push((format!("{prefix}wv"), nodes.wv));
            bindings.push((format!("{prefix}wo"), nodes.wo));
            bindings.push((format!("{prefix}w1"), nodes.w1));
            bindings.push((format!("{prefix}b1"), nodes.b1));
            bindings.push((format!("{prefix}w2"), nodes.w2));
            bindings.push((format!("{prefix}b2"), nodes.b2));
            bindings.push((format!("{prefix}ln1_gain"), nodes.ln1_gain));
            bindings.push((format!("{prefix}ln1_shift"), nodes.ln1_shift));
            bindings.push((format!("{prefix}ln2_gain"), nodes.ln2_gain));
            bindings.push((format!("{prefix}ln2_shift"), nodes.ln2_shift));
            match (&nodes.adapter, &b.adapter) {
                (Some(AdapterNodes::Faa(n)), Some(AdapterParams::Faa(p))) => {
                    push_faa_bindings(&mut bindings, &prefix, n, p);
                }
                (Some(AdapterNodes::Baseline(n)), Some(AdapterParams::Baseline(_))) => {
                    bindings.push((format!("{prefix}adapter.w_down"), n.w_down));
                    bindings.push((format!("{prefix}adapter.w_up"), n.w_up));
                    bindings.push((format!("{prefix}adapter.b_down"), n.b_down));
                    bindings.push((format!("{prefix}adapter.b_up"), n.b_up));
                    bindings.push((format!("{prefix}adapter.gamma"), n.gamma));
                }
                (None, None) => {}
                _ => unreachable!("adapter nodes mirror adapter params"),
            }
            blocks.push(nodes);
        }
        let head_w = tape.leaf_tensor(&self.head_w);
        let head_b = tape.leaf_tensor(&self.head_b);
        bindings.push(("head.w".to_string(), head_w));
        bindings.push(("head.b".to_string(), head_b));
        ModelNodes { embed, blocks, head_w, head_b, bindings }
    }

    /// One sample through embedding, positional encoding, all blocks, and
    /// the mean-pooled classifier head. `x` is `[t, d_model]` row-major.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        x: &[f64],
        t: usize,
        mode: &mut ForwardMode,
    ) -> SampleForward {
        let d = self.faa.d_model;
        assert_eq!(
            x.len(),
            t * d,
            "forward_sample: input length {} does not match [{t}, {d}]",
            x.len()
        );
        let x = tape.constant(t, d, x.to_vec());
        let projected = tape.matmul(x, nodes.embed);
        let pe = tape.constant(t, d, sinusoidal_positional_encoding(t, d));
        let mut h = tape.add(projected, pe);

        let mut gates_by_layer = Vec::new();
        let mut contribs_by_layer = Vec::new();
        for (l, bn) in nodes.blocks.iter().enumerate() {
            let out = block_forward(
                tape,
                h,
                bn,
                self.encoder.n_heads,
                &self.faa.ablation,
                self.faa.mode,
                mode,
            );
            h = out.h;
            if let Some(g) = out.gates {
                gates_by_layer.push((l, g));
            }
            if let Some(c) = out.contribs {
                contribs_by_layer.push((l, c));
            }
        }

        let pooled = tape.mean_axis0(h);
        let logits = tape.matmul(pooled, nodes.head_w);
        let logits = tape.add_row(logits, nodes.head_b);
        SampleForward { logits, gates_by_layer, contribs_by_layer }
    }

    /// Eval-mode logits for one sample, on a throwaway tape.
    pub fn predict(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let nodes = self.leaf(&mut tape);
        let fwd = self.forward_sample(&mut tape, &nodes, x, t, &mut ForwardMode::Eval);
        tape.data(fwd.logits).to_vec()
    }

    /// Reads gradients off a tape after backward, keyed by parameter name.
    /// Only tensors that received a gradient appear.
    pub fn collect_grads(&self, tape: &Tape, nodes: &ModelNodes) -> GradMap {
        let mut out = GradMap::new();
        for (name, id) in &nodes.bindings {
            if let Some(g) = tape.grad(*id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

fn push_faa_bindings(
    bindings: &mut Vec<(String, NodeId)>,
    prefix: &str,
    n: &FaaLayerNodes,
    p: &FaaLayerParams,
) {
    bindings.push((format!("{prefix}adapter.w_rff"), n.w_rff));
    bindings.push((format!("{prefix}adapter.b_rff"), n.b_rff));
    bindings.push((format!("{prefix}adapter.w_base"), n.w_base));
    bindings.push((format!("{prefix}adapter.alpha"), n.alpha));
    bindings.push((format!("{prefix}adapter.beta"), n.beta));
    for i in 0..p.num_grids() {
        bindings.push((format!("{prefix}adapter.channel_w.{i}"), n.channel_w[i]));
        bindings.push((format!("{prefix}adapter.channel_b.{i}"), n.channel_b[i]));
        bindings.push((format!("{prefix}adapter.gate_w.{i}"), n.gate_w[i]));
        bindings.push((format!("{prefix}adapter.gate_a.{i}"), n.gate_a[i]));
        bindings.push((format!("{prefix}adapter.gate_c.{i}"), n.gate_c[i]));
    }
    if let Some(fg) = n.free_gate {
        bindings.push((format!("{prefix}adapter.free_gate"), fg));
    }
    bindings.push((format!("{prefix}adapter.p_mix"), n.p_mix));
    bindings.push((format!("{prefix}adapter.w_down"), n.w_down));
    bindings.push((format!("{prefix}adapter.w_up"), n.w_up));
    bindings.push((format!("{prefix}adapter.b_down"), n.b_down));
    bindings.push((format!("{prefix}adapter.b_up"), n.b_up));
    bindings.push((format!("{prefix}adapter.gamma"), n.gamma));
}

#[derive(Debug, Clone)]
pub enum AdapterNodes {
    Faa(FaaLayerNodes),
    Baseline(BaselineAdapterNodes),
}

#[derive(Debug, Clone)]
pub struct BlockNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_shift: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_shift: NodeId,
    pub adapter: Option<AdapterNodes>,
}

#[derive(Debug)]
pub struct ModelNodes {
    pub embed: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub bindings: Vec<(String, NodeId)>,
}

/// Dropout behavior for a forward pass. Gradient checks and evaluation use
/// [`ForwardMode::Eval`], which applies no dropout at all.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut StreamRng },
}

impl ForwardMode<'_> {
    fn apply_dropout(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            ForwardMode::Eval => x,
            ForwardMode::Train { dropout, rng } => {
                if *dropout == 0.0 {
                    return x;
                }
                let (r, c) = tape.shape(x);
                let keep_prob = 1.0 - *dropout;
                let keep: Vec<bool> = (0..r * c).map(|_| rng.uniform() >= *dropout).collect();
                tape.dropout(x, &keep, keep_prob)
            }
        }
    }
}

pub struct SampleForward {
    pub logits: NodeId,
    /// `(block index, [t, num_grids])` per gated adapter layer.
    pub gates_by_layer: Vec<(usize, NodeId)>,
    /// `(block index, per-channel weighted contributions)`.
    pub contribs_by_layer: Vec<(usize, Vec<NodeId>)>,
}

pub struct BlockForward {
    pub h: NodeId,
    pub gates: Option<NodeId>,
    pub contribs: Option<Vec<NodeId>>,
}

/// Fixed sinusoidal positional encoding, `[t, d]` row-major.
pub fn sinusoidal_positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Scaled dot-product attention over `n_heads` column slices of the
/// projections, concatenated and mixed by the output matrix.
pub fn multi_head_attention(
    tape: &mut Tape,
    h: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    n_heads: usize,
) -> NodeId {
    let (_, d) = tape.shape(h);
    assert!(n_heads > 0 && d % n_heads == 0, "attention: {n_heads} heads do not divide width {d}");
    let dh = d / n_heads;
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qh = tape.slice_cols(q, i * dh, dh);
        let kh = tape.slice_cols(k, i * dh, dh);
        let vh = tape.slice_cols(v, i * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let mut cat = heads[0];
    for &head in &heads[1..] {
        cat = tape.concat_cols(cat, head);
    }
    tape.matmul(cat, wo)
}

/// One encoder block; see the module docs for the exact dataflow.
pub fn block_forward(
    tape: &mut Tape,
    h_prev: NodeId,
    bn: &BlockNodes,
    n_heads: usize,
    ablation: &AblationFlags,
    mode: crate::adapter::FaaMode,
    fwd_mode: &mut ForwardMode,
) -> BlockForward {
    let attn = multi_head_attention(tape, h_prev, bn.wq, bn.wk, bn.wv, bn.wo, n_heads);
    let attn = fwd_mode.apply_dropout(tape, attn);

    let mut sum = tape.add(h_prev, attn);
    let mut gates = None;
    let mut contribs = None;
    if let Some(adapter) = &bn.adapter {
        let (adapter_out, gamma) = match adapter {
            AdapterNodes::Faa(n) => {
                let fwd = faa_adapter_forward(tape, attn, n, mode, ablation);
                gates = fwd.gates;
                contribs = fwd.contribs;
                (fwd.out, n.gamma)
            }
            AdapterNodes::Baseline(n) => (baseline_adapter_forward(tape, attn, n), n.gamma),
        };
        let scaled = tape.mul_row(adapter_out, gamma);
        sum = tape.add(sum, scaled);
    }
    let mid = tape.layernorm(sum, bn.ln1_gain, bn.ln1_shift, LN_EPS);

    let ffn = tape.matmul(mid, bn.w1);
    let ffn = tape.add_row(ffn, bn.b1);
    let ffn = tape.gelu(ffn);
    let ffn = fwd_mode.apply_dropout(tape, ffn);
    let ffn = tape.matmul(ffn, bn.w2);
    let ffn = tape.add_row(ffn, bn.b2);
    let out_sum = tape.add(mid, ffn);
    let h = tape.layernorm(out_sum, bn.ln2_gain, bn.ln2_shift, LN_EPS);
    BlockForward { h, gates, contribs }
}

// ── Partition and freeze ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frozen backbone: embedding projection, attention, ffn, layer norms.
    Base,
    /// Adapter parameters (including frozen random projections) and the
    /// classifier head.
    Faa,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub labels: BTreeMap<String, ParamGroup>,
}

impl Partition {
    pub fn group_of(name: &str) -> ParamGroup {
        if name.contains(".adapter.") || name.starts_with("head.") {
            ParamGroup::Faa
        } else {
            ParamGroup::Base
        }
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.labels.values().filter(|&&g| g == group).count()
    }
}

/// Labels every parameter of the model. Total and disjoint by construction:
/// each name is visited exactly once and mapped to exactly one group.
pub fn partition_params(model: &Model) -> Partition {
    let mut labels = BTreeMap::new();
    model.visit(&mut |name, _| {
        let prev = labels.insert(name.clone(), Partition::group_of(&name));
        assert!(prev.is_none(), "duplicate parameter name {name}");
    });
    Partition { labels }
}

/// Removes gradients of frozen-backbone parameters from a gradient map.
/// The trainability flags already prevent those gradients from being
/// computed; this is the contractual guard for maps of any origin.
pub fn apply_freeze(grads: &mut GradMap, partition: &Partition) {
    grads.retain(|name, _| {
        partition.labels.get(name).copied().unwrap_or_else(|| Partition::group_of(name))
            == ParamGroup::Faa
    });
}
