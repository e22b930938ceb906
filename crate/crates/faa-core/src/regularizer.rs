//! Sparsity and orthogonality penalty on channel gates.
//!
//! For each adapter layer with gate vectors `r` (one per token), the penalty
//! is `lambda1 * sum_i |r_i| + lambda2 * sum_{i<j} (r_i r_j)^2`, averaged
//! over the layer's gate vectors and summed over layers. Averaging keeps the
//! weights comparable across batch sizes and sequence lengths. The term is
//! differentiable through the gates, so it shapes how gates respond to
//! inputs rather than just their current values.

use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RegWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        assert!(
            lambda1 >= 0.0 && lambda2 >= 0.0,
            "regularizer weights must be non-negative, got ({lambda1}, {lambda2})"
        );
        RegWeights { lambda1, lambda2 }
    }
}

/// Builds the gate penalty as a `[1, 1]` node. `gates_by_layer[l]` holds the
/// `[t, n]` gate nodes recorded for layer `l`, one entry per sample. Layers
/// without gates (or an empty list) contribute zero.
pub fn freq_regularizer(tape: &mut Tape, gates_by_layer: &[Vec<NodeId>], w: RegWeights) -> NodeId {
    let mut total: Option<NodeId> = None;
    for layer_gates in gates_by_layer {
        if layer_gates.is_empty() {
            continue;
        }
        let n = tape.shape(layer_gates[0]).1;
        let mut vector_count = 0usize;
        let mut l1: Option<NodeId> = None;
        let mut orth: Option<NodeId> = None;
        for &g in layer_gates {
            let (t, cols) = tape.shape(g);
            assert_eq!(
                cols, n,
                "freq_regularizer: gate widths disagree within a layer: {cols} vs {n}"
            );
            vector_count += t;

            let a = tape.abs(g);
            let s = tape.sum_all(a);
            l1 = Some(match l1 {
                Some(acc) => tape.add(acc, s),
                None => s,
            });

            for i in 0..n {
                for j in (i + 1)..n {
                    let ri = tape.slice_cols(g, i, 1);
                    let rj = tape.slice_cols(g, j, 1);
                    let prod = tape.mul(ri, rj);
                    let sq = tape.mul(prod, prod);
                    let s = tape.sum_all(sq);
                    orth = Some(match orth {
                        Some(acc) => tape.add(acc, s),
                        None => s,
                    });
                }
            }
        }

        let inv = 1.0 / vector_count as f64;
        let mut layer_term = tape.scale(l1.unwrap(), w.lambda1 * inv);
        if let Some(o) = orth {
            let o = tape.scale(o, w.lambda2 * inv);
            layer_term = tape.add(layer_term, o);
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, layer_term),
            None => layer_term,
        });
    }
    total.unwrap_or_else(|| tape.constant_scalar(0.0))
}

/// `task + penalty`; both must be scalar nodes.
pub fn total_loss(tape: &mut Tape, task: NodeId, penalty: NodeId) -> NodeId {
    tape.add(task, penalty)
}
