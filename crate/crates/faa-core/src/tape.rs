//! Reverse-mode autodiff on a dynamic, single-use tape.
//!
//! A forward pass records one [`Node`] per operation; node ids are indices
//! into the tape, so every input precedes its consumers and the graph is
//! acyclic by construction. [`Tape::backward`] walks the records in reverse
//! and accumulates gradients into every node that requires them. Gradients
//! of nodes with `requires_grad = false` are never materialized, which is
//! how frozen parameters stay frozen.
//!
//! All node payloads are treated as `[rows, cols]` matrices in row-major
//! order; vectors enter as a single row and scalars as `[1, 1]`. Shape
//! violations are programming errors and panic with both shapes named.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub type GradMap = BTreeMap<String, Vec<f64>>;

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_COEF: f64 = 0.044_715;

/// Tanh-form GELU used throughout the stack.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh())
}

/// Closed-form derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Cos,
    Sin,
    Gelu,
    Sigmoid,
    Abs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulRow { x: NodeId, v: NodeId },
    ScaleRows { x: NodeId, s: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId, s: NodeId },
    MulScalar { x: NodeId, s: NodeId },
    Unary { x: NodeId, kind: UnaryKind },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, eps: f64 },
    SoftmaxRows { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize },
    RepeatRows { x: NodeId },
    MeanRows { x: NodeId },
    MeanAxis0 { x: NodeId },
    SumAll { x: NodeId },
    Dropout { x: NodeId, scaled_mask: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, rg: bool, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { rows, cols, data, requires_grad: rg, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Node construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> NodeId {
        assert_eq!(
            rows * cols,
            data.len(),
            "leaf data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        self.push(rows, cols, data, requires_grad, Op::Leaf)
    }

    /// Copies a tensor onto the tape, carrying its `requires_grad` flag.
    /// Rank-1 tensors become a single row.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        let (r, c) = t.dims();
        self.push(r, c, t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        self.leaf(rows, cols, data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(1, 1, vec![v], false)
    }

    // ── Accessors ────────────────────────────────────────────────────────

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> f64 {
        let n = self.node(id);
        assert_eq!(n.data.len(), 1, "value() expects a scalar node, got [{}, {}]", n.rows, n.cols);
        n.data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── Operations ───────────────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions disagree: [{m}, {ka}] x [{kb}, {n}]"
        );
        let mut out = vec![0.0; m * n];
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..m {
                for k in 0..ka {
                    let av = ad[i * ka + k];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(m, n, out, rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        {
            let xd = &self.node(x).data;
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xd[i * c + j];
                }
            }
        }
        let rg = self.rg(x);
        self.push(c, r, out, rg, Op::Transpose { x })
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(
            (ra, ca),
            (rb, cb),
            "add: shapes disagree: [{ra}, {ca}] vs [{rb}, {cb}]"
        );
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(ra, ca, out, rg, Op::Add { a, b })
    }

    /// Adds a `[1, c]` bias to every row of `[r, c]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let (rb, cb) = self.shape(bias);
        assert_eq!(
            (rb, cb),
            (1, c),
            "add_row: bias must be [1, {c}] to match [{r}, {c}], got [{rb}, {cb}]"
        );
        let mut out = self.node(x).data.clone();
        {
            let bd = &self.node(bias).data;
            for row in out.chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(r, c, out, rg, Op::AddRow { x, bias })
    }

    /// Hadamard product of two same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(
            (ra, ca),
            (rb, cb),
            "mul: shapes disagree: [{ra}, {ca}] vs [{rb}, {cb}]"
        );
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(ra, ca, out, rg, Op::Mul { a, b })
    }

    /// Scales every row of `[r, c]` elementwise by a `[1, c]` vector.
    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let (rv, cv) = self.shape(v);
        assert_eq!(
            (rv, cv),
            (1, c),
            "mul_row: vector must be [1, {c}] to match [{r}, {c}], got [{rv}, {cv}]"
        );
        let mut out = self.node(x).data.clone();
        {
            let vd = &self.node(v).data;
            for row in out.chunks_mut(c) {
                for (o, &vv) in row.iter_mut().zip(vd) {
                    *o *= vv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(r, c, out, rg, Op::MulRow { x, v })
    }

    /// Scales row i of `[r, c]` by the scalar `s[i]`, `s: [r, 1]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let (rs, cs) = self.shape(s);
        assert_eq!(
            (rs, cs),
            (r, 1),
            "scale_rows: scale must be [{r}, 1] to match [{r}, {c}], got [{rs}, {cs}]"
        );
        let mut out = self.node(x).data.clone();
        {
            let sd = &self.node(s).data;
            for (i, row) in out.chunks_mut(c).enumerate() {
                for o in row.iter_mut() {
                    *o *= sd[i];
                }
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(r, c, out, rg, Op::ScaleRows { x, s })
    }

    /// Multiplies by a compile-time constant (no gradient to `c`).
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let (r, cc) = self.shape(x);
        let out: Vec<f64> = self.node(x).data.iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(r, cc, out, rg, Op::Scale { x, c })
    }

    /// Adds a learnable scalar node `s: [1, 1]` to every element.
    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let (rs, cs) = self.shape(s);
        assert_eq!((rs, cs), (1, 1), "add_scalar: s must be [1, 1], got [{rs}, {cs}]");
        let sv = self.node(s).data[0];
        let out: Vec<f64> = self.node(x).data.iter().map(|v| v + sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(r, c, out, rg, Op::AddScalar { x, s })
    }

    /// Multiplies every element by a learnable scalar node `s: [1, 1]`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let (rs, cs) = self.shape(s);
        assert_eq!((rs, cs), (1, 1), "mul_scalar: s must be [1, 1], got [{rs}, {cs}]");
        let sv = self.node(s).data[0];
        let out: Vec<f64> = self.node(x).data.iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(r, c, out, rg, Op::MulScalar { x, s })
    }

    fn unary(&mut self, x: NodeId, kind: UnaryKind) -> NodeId {
        let (r, c) = self.shape(x);
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Cos => f64::cos,
            UnaryKind::Sin => f64::sin,
            UnaryKind::Gelu => gelu_scalar,
            UnaryKind::Sigmoid => sigmoid_scalar,
            UnaryKind::Abs => f64::abs,
        };
        let out: Vec<f64> = self.node(x).data.iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(r, c, out, rg, Op::Unary { x, kind })
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Cos)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Sin)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, UnaryKind::Abs)
    }

    /// Row-wise normalization to zero mean and unit variance (population
    /// variance, stabilized by `eps`), then an affine map by `gain`/`shift`
    /// vectors of shape `[1, c]`.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let (rg_, cg) = self.shape(gain);
        let (rs, cs) = self.shape(shift);
        assert_eq!((rg_, cg), (1, c), "layernorm: gain must be [1, {c}], got [{rg_}, {cg}]");
        assert_eq!((rs, cs), (1, c), "layernorm: shift must be [1, {c}], got [{rs}, {cs}]");
        assert!(c > 0, "layernorm: empty rows");
        let mut out = vec![0.0; r * c];
        {
            let xd = &self.node(x).data;
            let gd = &self.node(gain).data;
            let sd = &self.node(shift).data;
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let istd = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * istd * gd[j] + sd[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        self.push(r, c, out, rg, Op::LayerNorm { x, gain, shift, eps })
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        {
            let xd = &self.node(x).data;
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut denom = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
                for j in 0..c {
                    out[i * c + j] /= denom;
                }
            }
        }
        let rg = self.rg(x);
        self.push(r, c, out, rg, Op::SoftmaxRows { x })
    }

    /// Concatenates along the column axis: `[r, p] ++ [r, q] -> [r, p + q]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat_cols: row counts disagree: [{ra}, {ca}] vs [{rb}, {cb}]");
        let c = ca + cb;
        let mut out = Vec::with_capacity(ra * c);
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..ra {
                out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(ra, c, out, rg, Op::ConcatCols { a, b })
    }

    /// Extracts columns `[start, start + len)`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(
            start + len <= c,
            "slice_cols: range {start}..{} out of bounds for [{r}, {c}]",
            start + len
        );
        let mut out = Vec::with_capacity(r * len);
        {
            let xd = &self.node(x).data;
            for i in 0..r {
                out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
            }
        }
        let rg = self.rg(x);
        self.push(r, len, out, rg, Op::SliceCols { x, start })
    }

    /// Tiles a `[1, c]` row `t` times into `[t, c]`.
    pub fn repeat_rows(&mut self, x: NodeId, t: usize) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(r, 1, "repeat_rows: input must be a single row, got [{r}, {c}]");
        assert!(t > 0, "repeat_rows: zero rows requested");
        let mut out = Vec::with_capacity(t * c);
        for _ in 0..t {
            out.extend_from_slice(&self.nodes[x.0].data.clone());
        }
        let rg = self.rg(x);
        self.push(t, c, out, rg, Op::RepeatRows { x })
    }

    /// Mean over the column axis: `[r, c] -> [r, 1]`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(c > 0, "mean_rows: empty rows");
        let mut out = vec![0.0; r];
        {
            let xd = &self.node(x).data;
            for i in 0..r {
                out[i] = xd[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            }
        }
        let rg = self.rg(x);
        self.push(r, 1, out, rg, Op::MeanRows { x })
    }

    /// Mean over the row axis: `[r, c] -> [1, c]`.
    pub fn mean_axis0(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        assert!(r > 0, "mean_axis0: empty input");
        let mut out = vec![0.0; c];
        {
            let xd = &self.node(x).data;
            for i in 0..r {
                for j in 0..c {
                    out[j] += xd[i * c + j];
                }
            }
            for o in out.iter_mut() {
                *o /= r as f64;
            }
        }
        let rg = self.rg(x);
        self.push(1, c, out, rg, Op::MeanAxis0 { x })
    }

    /// Sum of all elements: `[r, c] -> [1, 1]`.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.node(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![total], rg, Op::SumAll { x })
    }

    /// Inverted dropout: kept elements are scaled by `1 / keep_prob` so the
    /// expectation is unchanged. `keep` flags one element each.
    pub fn dropout(&mut self, x: NodeId, keep: &[bool], keep_prob: f64) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(
            keep.len(),
            r * c,
            "dropout: mask length {} does not match [{r}, {c}]",
            keep.len()
        );
        assert!(keep_prob > 0.0 && keep_prob <= 1.0, "dropout: keep_prob {keep_prob} out of (0, 1]");
        let inv = 1.0 / keep_prob;
        let scaled_mask: Vec<f64> = keep.iter().map(|&k| if k { inv } else { 0.0 }).collect();
        let out: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .zip(&scaled_mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.rg(x);
        self.push(r, c, out, rg, Op::Dropout { x, scaled_mask })
    }

    /// Mean softmax cross-entropy over rows of `logits: [b, c]` against
    /// integer class targets. Returns a `[1, 1]` scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (b, c) = self.shape(logits);
        assert_eq!(
            targets.len(),
            b,
            "cross_entropy: {} targets for {b} logit rows",
            targets.len()
        );
        let mut total = 0.0;
        {
            let ld = &self.node(logits).data;
            for (i, &t) in targets.iter().enumerate() {
                assert!(t < c, "cross_entropy: target {t} out of range for {c} classes");
                let row = &ld[i * c..(i + 1) * c];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let rg = self.rg(logits);
        self.push(1, 1, vec![total / b as f64], rg, Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss` node. Pass-local adjoints are
    /// propagated through the records in reverse creation order, then folded
    /// into each tracked node's `grad`, so calling `backward` twice without
    /// [`Tape::zero_grads`] doubles every stored gradient.
    pub fn backward(&mut self, loss: NodeId) {
        {
            let n = self.node(loss);
            assert_eq!(
                n.data.len(),
                1,
                "backward: loss must be scalar, got [{}, {}]",
                n.rows,
                n.cols
            );
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return;
        }
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, gv) in acc.iter_mut().zip(&g) {
                            *a += gv;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
    }

    /// Adds `contribution` into the pass-local adjoint of `id`, skipping
    /// nodes that do not require grad.
    fn acc(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
        if !self.rg(id) {
            return;
        }
        match adj[id.0].as_mut() {
            Some(buf) => {
                for (a, c) in buf.iter_mut().zip(&contribution) {
                    *a += c;
                }
            }
            None => adj[id.0] = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.rg(a) {
                    // dA = g . B^T
                    let bd = &self.node(b).data;
                    let mut da = vec![0.0; m * k];
                    for ii in 0..m {
                        for jj in 0..n {
                            let gv = g[ii * n + jj];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[ii * k + kk] += gv * bd[kk * n + jj];
                            }
                        }
                    }
                    self.acc(adj, a, da);
                }
                if self.rg(b) {
                    // dB = A^T . g
                    let ad = &self.node(a).data;
                    let mut db = vec![0.0; k * n];
                    for ii in 0..m {
                        for kk in 0..k {
                            let av = ad[ii * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            for jj in 0..n {
                                db[kk * n + jj] += av * g[ii * n + jj];
                            }
                        }
                    }
                    self.acc(adj, b, db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.shape(x);
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    for jj in 0..c {
                        dx[ii * c + jj] = g[jj * r + ii];
                    }
                }
                self.acc(adj, x, dx);
            }
            Op::Add { a, b } => {
                self.acc(adj, a, g.to_vec());
                self.acc(adj, b, g.to_vec());
            }
            Op::AddRow { x, bias } => {
                self.acc(adj, x, g.to_vec());
                if self.rg(bias) {
                    let (_, c) = self.shape(bias);
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc(adj, bias, db);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let bd = &self.node(b).data;
                    self.acc(adj, a, g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect());
                }
                if self.rg(b) {
                    let ad = &self.node(a).data;
                    self.acc(adj, b, g.iter().zip(ad).map(|(gv, av)| gv * av).collect());
                }
            }
            Op::MulRow { x, v } => {
                let (r, c) = self.shape(x);
                if self.rg(x) {
                    let vd = &self.node(v).data;
                    let mut dx = vec![0.0; r * c];
                    for ii in 0..r {
                        for jj in 0..c {
                            dx[ii * c + jj] = g[ii * c + jj] * vd[jj];
                        }
                    }
                    self.acc(adj, x, dx);
                }
                if self.rg(v) {
                    let xd = &self.node(x).data;
                    let mut dv = vec![0.0; c];
                    for ii in 0..r {
                        for jj in 0..c {
                            dv[jj] += g[ii * c + jj] * xd[ii * c + jj];
                        }
                    }
                    self.acc(adj, v, dv);
                }
            }
            Op::ScaleRows { x, s } => {
                let (r, c) = self.shape(x);
                if self.rg(x) {
                    let sd = &self.node(s).data;
                    let mut dx = vec![0.0; r * c];
                    for ii in 0..r {
                        for jj in 0..c {
                            dx[ii * c + jj] = g[ii * c + jj] * sd[ii];
                        }
                    }
                    self.acc(adj, x, dx);
                }
                if self.rg(s) {
                    let xd = &self.node(x).data;
                    let mut ds = vec![0.0; r];
                    for ii in 0..r {
                        for jj in 0..c {
                            ds[ii] += g[ii * c + jj] * xd[ii * c + jj];
                        }
                    }
                    self.acc(adj, s, ds);
                }
            }
            Op::Scale { x, c } => {
                self.acc(adj, x, g.iter().map(|gv| gv * c).collect());
            }
            Op::AddScalar { x, s } => {
                self.acc(adj, x, g.to_vec());
                if self.rg(s) {
                    self.acc(adj, s, vec![g.iter().sum()]);
                }
            }
            Op::MulScalar { x, s } => {
                if self.rg(x) {
                    let sv = self.node(s).data[0];
                    self.acc(adj, x, g.iter().map(|gv| gv * sv).collect());
                }
                if self.rg(s) {
                    let xd = &self.node(x).data;
                    let ds: f64 = g.iter().zip(xd).map(|(gv, xv)| gv * xv).sum();
                    self.acc(adj, s, vec![ds]);
                }
            }
            Op::Unary { x, kind } => {
                let xd = &self.node(x).data;
                let dx: Vec<f64> = match kind {
                    UnaryKind::Cos => g.iter().zip(xd).map(|(gv, xv)| -gv * xv.sin()).collect(),
                    UnaryKind::Sin => g.iter().zip(xd).map(|(gv, xv)| gv * xv.cos()).collect(),
                    UnaryKind::Gelu => {
                        g.iter().zip(xd).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect()
                    }
                    UnaryKind::Sigmoid => g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &xv)| {
                            let s = sigmoid_scalar(xv);
                            gv * s * (1.0 - s)
                        })
                        .collect(),
                    UnaryKind::Abs => g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                };
                self.acc(adj, x, dx);
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let (r, c) = self.shape(x);
                let xd = &self.node(x).data;
                let gd = &self.node(gain).data;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ii in 0..r {
                    let row = &xd[ii * c..(ii + 1) * c];
                    let grow = &g[ii * c..(ii + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * istd; y_j = gain_j * xhat_j + shift_j
                    let mut sum_h = 0.0;
                    let mut sum_hx = 0.0;
                    for jj in 0..c {
                        let xhat = (row[jj] - mean) * istd;
                        let h = grow[jj] * gd[jj];
                        sum_h += h;
                        sum_hx += h * xhat;
                        dgain[jj] += grow[jj] * xhat;
                        dshift[jj] += grow[jj];
                    }
                    for jj in 0..c {
                        let xhat = (row[jj] - mean) * istd;
                        let h = grow[jj] * gd[jj];
                        dx[ii * c + jj] =
                            istd * (h - sum_h / c as f64 - xhat * sum_hx / c as f64);
                    }
                }
                self.acc(adj, x, dx);
                self.acc(adj, gain, dgain);
                self.acc(adj, shift, dshift);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = self.shape(x);
                let yd = &self.nodes[i].data;
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    let yrow = &yd[ii * c..(ii + 1) * c];
                    let grow = &g[ii * c..(ii + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for jj in 0..c {
                        dx[ii * c + jj] = yrow[jj] * (grow[jj] - dot);
                    }
                }
                self.acc(adj, x, dx);
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.shape(a);
                let (_, cb) = self.shape(b);
                let c = ca + cb;
                if self.rg(a) {
                    let mut da = vec![0.0; r * ca];
                    for ii in 0..r {
                        da[ii * ca..(ii + 1) * ca].copy_from_slice(&g[ii * c..ii * c + ca]);
                    }
                    self.acc(adj, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; r * cb];
                    for ii in 0..r {
                        db[ii * cb..(ii + 1) * cb].copy_from_slice(&g[ii * c + ca..(ii + 1) * c]);
                    }
                    self.acc(adj, b, db);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(x);
                let len = self.nodes[i].cols;
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    dx[ii * c + start..ii * c + start + len]
                        .copy_from_slice(&g[ii * len..(ii + 1) * len]);
                }
                self.acc(adj, x, dx);
            }
            Op::RepeatRows { x } => {
                let (_, c) = self.shape(x);
                let t = self.nodes[i].rows;
                let mut dx = vec![0.0; c];
                for ii in 0..t {
                    for jj in 0..c {
                        dx[jj] += g[ii * c + jj];
                    }
                }
                self.acc(adj, x, dx);
            }
            Op::MeanRows { x } => {
                let (r, c) = self.shape(x);
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    let gv = g[ii] / c as f64;
                    for jj in 0..c {
                        dx[ii * c + jj] = gv;
                    }
                }
                self.acc(adj, x, dx);
            }
            Op::MeanAxis0 { x } => {
                let (r, c) = self.shape(x);
                let mut dx = vec![0.0; r * c];
                for ii in 0..r {
                    for jj in 0..c {
                        dx[ii * c + jj] = g[jj] / r as f64;
                    }
                }
                self.acc(adj, x, dx);
            }
            Op::SumAll { x } => {
                let (r, c) = self.shape(x);
                self.acc(adj, x, vec![g[0]; r * c]);
            }
            Op::Dropout { x, scaled_mask } => {
                self.acc(adj, x, g.iter().zip(&scaled_mask).map(|(gv, m)| gv * m).collect());
            }
            Op::CrossEntropy { logits, targets } => {
                let (b, c) = self.shape(logits);
                let ld = &self.node(logits).data;
                let scale = g[0] / b as f64;
                let mut dl = vec![0.0; b * c];
                for (ii, &t) in targets.iter().enumerate() {
                    let row = &ld[ii * c..(ii + 1) * c];
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for jj in 0..c {
                        let p = (row[jj] - max).exp() / denom;
                        dl[ii * c + jj] = (p - if jj == t { 1.0 } else { 0.0 }) * scale;
                    }
                }
                self.acc(adj, logits, dl);
            }
        }
    }
}

// ── Gradient-map utilities ───────────────────────────────────────────────

/// Scales every gradient in `grads` so the global l2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_global_norm: max_norm must be positive, got {max_norm}");
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_err};
    use crate::rng::StreamRng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} beyond {tol}");
        }
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(1, 2, vec![1.0, 2.0], false);
        let b = tape.leaf(2, 1, vec![3.0, 4.0], false);
        let y = tape.matmul(a, b);
        assert_eq!(tape.data(y), &[11.0]);
        assert_eq!(tape.shape(y), (1, 1));
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(2, 3, vec![0.0; 6], false);
        let b = tape.leaf(4, 5, vec![0.0; 20], false);
        tape.matmul(a, b);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 4, vec![1.0, -2.0, 3.0, 0.5], true);
        let s = tape.sum_all(x);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 3, vec![0.3, -0.7, 2.0], true);
        let y = tape.gelu(x);
        let s = tape.sum_all(y);
        tape.backward(s);
        let first = tape.grad(x).unwrap().to_vec();
        tape.backward(s);
        let second = tape.grad(x).unwrap().to_vec();
        let doubled: Vec<f64> = first.iter().map(|v| 2.0 * v).collect();
        assert_close(&second, &doubled, 1e-15);
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 2, vec![1.0, 2.0], true);
        let w = tape.leaf(2, 2, vec![0.5, -0.25, 1.5, 0.75], false);
        let y = tape.matmul(x, w);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // gelu(x) -> x for large x, -> 0 for very negative x.
        assert!((gelu_scalar(6.0) - 6.0).abs() < 1e-6);
        assert!(gelu_scalar(-6.0).abs() < 1e-6);
        assert!((gelu_grad_scalar(0.0) - 0.5).abs() < 1e-12);
        // Spot value against the tanh form evaluated by hand.
        let x = 1.0f64;
        let expect = 0.5 * (1.0 + (0.7978845608028654 * 1.044715f64).tanh());
        assert!((gelu_scalar(x) - expect).abs() < 1e-15);
    }

    #[test]
    fn layernorm_passes_through_standardized_rows() {
        let mut tape = Tape::new();
        let eps = 1e-5;
        let x = tape.leaf(1, 2, vec![-1.0, 1.0], false);
        let gain = tape.constant(1, 2, vec![1.0, 1.0]);
        let shift = tape.constant(1, 2, vec![0.0, 0.0]);
        let y = tape.layernorm(x, gain, shift, eps);
        // Input already has zero mean and unit population variance, so the
        // output only shrinks by the eps stabilizer.
        let expect = 1.0 / (1.0f64 + eps).sqrt();
        assert_close(tape.data(y), &[-expect, expect], 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0], false);
        let y = tape.softmax_rows(x);
        for row in tape.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(1, 4, vec![0.0; 4], false);
        let loss = tape.cross_entropy(logits, &[2]);
        assert!((tape.value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    /// Every differentiable op, checked against central finite differences
    /// on randomized small shapes. 100 seeded trials spread over the op set.
    #[test]
    fn op_gradients_match_finite_differences() {
        type Builder = fn(&mut Tape, &[NodeId]) -> NodeId;
        // Each entry: (name, input shapes, graph builder ending in a scalar).
        type Case = (&'static str, Vec<(usize, usize)>, Builder);
        let cases: Vec<Case> = vec![
            ("matmul", vec![(3, 4), (4, 2)], |t, xs| {
                let y = t.matmul(xs[0], xs[1]);
                t.sum_all(y)
            }),
            ("transpose", vec![(3, 5)], |t, xs| {
                let y = t.transpose(xs[0]);
                let z = t.gelu(y);
                t.sum_all(z)
            }),
            ("add", vec![(2, 3), (2, 3)], |t, xs| {
                let y = t.add(xs[0], xs[1]);
                let z = t.sin(y);
                t.sum_all(z)
            }),
            ("add_row", vec![(4, 3), (1, 3)], |t, xs| {
                let y = t.add_row(xs[0], xs[1]);
                let z = t.cos(y);
                t.sum_all(z)
            }),
            ("mul", vec![(2, 4), (2, 4)], |t, xs| {
                let y = t.mul(xs[0], xs[1]);
                t.sum_all(y)
            }),
            ("mul_row", vec![(3, 4), (1, 4)], |t, xs| {
                let y = t.mul_row(xs[0], xs[1]);
                let z = t.gelu(y);
                t.sum_all(z)
            }),
            ("scale_rows", vec![(3, 4), (3, 1)], |t, xs| {
                let y = t.scale_rows(xs[0], xs[1]);
                let z = t.sin(y);
                t.sum_all(z)
            }),
            ("scale", vec![(2, 5)], |t, xs| {
                let y = t.scale(xs[0], -1.7);
                let z = t.sigmoid(y);
                t.sum_all(z)
            }),
            ("add_scalar", vec![(2, 3), (1, 1)], |t, xs| {
                let y = t.add_scalar(xs[0], xs[1]);
                let z = t.sin(y);
                t.sum_all(z)
            }),
            ("mul_scalar", vec![(2, 3), (1, 1)], |t, xs| {
                let y = t.mul_scalar(xs[0], xs[1]);
                let z = t.gelu(y);
                t.sum_all(z)
            }),
            ("cos", vec![(2, 6)], |t, xs| {
                let y = t.cos(xs[0]);
                t.sum_all(y)
            }),
            ("sin", vec![(2, 6)], |t, xs| {
                let y = t.sin(xs[0]);
                t.sum_all(y)
            }),
            ("gelu", vec![(2, 6)], |t, xs| {
                let y = t.gelu(xs[0]);
                t.sum_all(y)
            }),
            ("sigmoid", vec![(2, 6)], |t, xs| {
                let y = t.sigmoid(xs[0]);
                t.sum_all(y)
            }),
            ("layernorm", vec![(3, 5), (1, 5), (1, 5)], |t, xs| {
                let y = t.layernorm(xs[0], xs[1], xs[2], 1e-5);
                let z = t.gelu(y);
                t.sum_all(z)
            }),
            ("softmax", vec![(3, 4)], |t, xs| {
                let y = t.softmax_rows(xs[0]);
                let w = t.sin(y);
                t.sum_all(w)
            }),
            ("concat_cols", vec![(3, 2), (3, 4)], |t, xs| {
                let y = t.concat_cols(xs[0], xs[1]);
                let z = t.gelu(y);
                t.sum_all(z)
            }),
            ("slice_cols", vec![(3, 6)], |t, xs| {
                let y = t.slice_cols(xs[0], 1, 3);
                let z = t.sin(y);
                t.sum_all(z)
            }),
            ("repeat_rows", vec![(1, 4)], |t, xs| {
                let y = t.repeat_rows(xs[0], 5);
                let z = t.gelu(y);
                t.sum_all(z)
            }),
            ("mean_rows", vec![(4, 3)], |t, xs| {
                let y = t.mean_rows(xs[0]);
                let z = t.sin(y);
                t.sum_all(z)
            }),
            ("mean_axis0", vec![(4, 3)], |t, xs| {
                let y = t.mean_axis0(xs[0]);
                let z = t.cos(y);
                t.sum_all(z)
            }),
            ("abs_smooth_region", vec![(2, 4)], |t, xs| {
                // Shift well away from the kink so finite differences are valid.
                let s = t.constant_scalar(3.0);
                let y = t.add_scalar(xs[0], s);
                let z = t.abs(y);
                t.sum_all(z)
            }),
            ("cross_entropy", vec![(3, 4)], |t, xs| {
                t.cross_entropy(xs[0], &[0, 3, 1])
            }),
            ("composite_chain", vec![(2, 3), (3, 3), (1, 3)], |t, xs| {
                let y = t.matmul(xs[0], xs[1]);
                let y = t.add_row(y, xs[2]);
                let y = t.gelu(y);
                let n = t.mean_rows(y);
                let z = t.sigmoid(n);
                t.sum_all(z)
            }),
        ];

        let trials_per_case = 100usize.div_ceil(cases.len());
        let h = 1e-5;
        for (name, shapes, builder) in &cases {
            for trial in 0..trials_per_case {
                let mut rng = StreamRng::new(0xfeed, &format!("gradop.{name}.{trial}"));
                let inputs: Vec<Vec<f64>> = shapes
                    .iter()
                    .map(|&(r, c)| (0..r * c).map(|_| rng.uniform_in(-1.5, 1.5)).collect())
                    .collect();

                // Analytic gradients.
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = shapes
                    .iter()
                    .zip(&inputs)
                    .map(|(&(r, c), data)| tape.leaf(r, c, data.clone(), true))
                    .collect();
                let loss = builder(&mut tape, &ids);
                tape.backward(loss);

                for (slot, &(r, c)) in shapes.iter().enumerate() {
                    let analytic = tape.grad(ids[slot]).unwrap().to_vec();
                    let fd = finite_diff_grad(
                        |vals| {
                            let mut t2 = Tape::new();
                            let ids2: Vec<NodeId> = shapes
                                .iter()
                                .zip(&inputs)
                                .enumerate()
                                .map(|(j, (&(r2, c2), data))| {
                                    let d = if j == slot { vals.to_vec() } else { data.clone() };
                                    t2.leaf(r2, c2, d, false)
                                })
                                .collect();
                            let l = builder(&mut t2, &ids2);
                            t2.value(l)
                        },
                        &inputs[slot],
                        h,
                    )
                    .unwrap();
                    let err = max_rel_err(&analytic, &fd);
                    assert!(
                        err <= 1e-5,
                        "{name} trial {trial} input {slot} ([{r}, {c}]): rel err {err:.3e}"
                    );
                }
            }
        }
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 4, vec![1.0, 2.0, 3.0, 4.0], true);
        let keep = vec![true, false, true, false];
        let y = tape.dropout(x, &keep, 0.5);
        assert_eq!(tape.data(y), &[2.0, 0.0, 6.0, 0.0]);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn clip_global_norm_rescales_only_above_threshold() {
        let mut grads = GradMap::new();
        grads.insert("a".into(), vec![3.0, 0.0]);
        grads.insert("b".into(), vec![0.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() <= 1e-12);
        assert_close(&grads["a"], &[0.6, 0.0], 1e-12);

        let mut small = GradMap::new();
        small.insert("a".into(), vec![0.1, 0.2]);
        let before = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, before);
    }

    #[test]
    fn value_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(1, 2, vec![1.0, 2.0], false);
        assert!(std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| tape.value(x))).is_err());
    }
}
