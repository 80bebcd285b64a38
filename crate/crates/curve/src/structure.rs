//! Relation scoring and sparse topology induction.
//!
//! The retained edge set is the union of each source node's Top-K
//! highest-scoring outgoing edges and every edge whose score exceeds a
//! global threshold. Selection is discrete; gradients flow through the
//! scores and embeddings of retained edges only, edges dropped this step
//! receive zero gradient (straight-through selection).

use crate::error::Result;
use crate::nn::{BoundMlp2, Mlp2};
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub const WEIGHT_EPSILON: f64 = 1e-6;

/// Scoring head: rectified relation mean -> sigmoid confidence in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub mlp: Mlp2,
}

impl ScorerParams {
    pub fn init(rel: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        ScorerParams {
            mlp: Mlp2::init(rel, hidden, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp2 {
        self.mlp.bind(tape)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.mlp.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mlp.visit_mut(prefix, f);
    }
}

/// Confidence scores for stacked rectified means (P, |R|) -> (P, 1).
pub fn score_relations(tape: &mut Tape, scorer: &BoundMlp2, mu_tilde: Var) -> Result<Var> {
    let raw = scorer.apply(tape, mu_tilde)?;
    Ok(tape.sigmoid(raw))
}

/// How sparsification selects edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsifyRule {
    /// Per-node Top-K union global threshold.
    TopKUnionThreshold { k: usize, tau: f64 },
    /// Threshold-only pruning (the RS2G-style baseline mode).
    ThresholdOnly { tau: f64 },
    /// Keep every ordered pair (sparsification disabled).
    Dense,
}

/// Retained ordered edges with their scores and message weights for one
/// frame of `n` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTopology {
    pub n_nodes: usize,
    /// Indices into the ordered-pair list used for scoring.
    pub retained: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl SparseTopology {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn avg_degree(&self) -> f64 {
        if self.n_nodes == 0 {
            return 0.0;
        }
        self.edges.len() as f64 / self.n_nodes as f64
    }
}

/// All ordered pairs (i, j), i != j, in row-major order. This fixed order is
/// shared by the relation encoder, the scorer, and the topology.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n.saturating_sub(1) * n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Select retained edges from per-pair scores. Ties break toward the lower
/// destination index, which the row-major pair order makes equivalent to
/// preferring the earlier pair.
pub fn induce_sparse_topology(
    scores: &[f64],
    pairs: &[(usize, usize)],
    n_nodes: usize,
    rule: SparsifyRule,
) -> SparseTopology {
    debug_assert_eq!(scores.len(), pairs.len());
    let mut keep = vec![false; pairs.len()];
    match rule {
        SparsifyRule::Dense => keep.iter_mut().for_each(|k| *k = true),
        SparsifyRule::ThresholdOnly { tau } => {
            for (e, &s) in scores.iter().enumerate() {
                keep[e] = s > tau;
            }
        }
        SparsifyRule::TopKUnionThreshold { k, tau } => {
            for (e, &s) in scores.iter().enumerate() {
                keep[e] = s > tau;
            }
            for i in 0..n_nodes {
                let mut outgoing: Vec<usize> = (0..pairs.len()).filter(|e| pairs[*e].0 == i).collect();
                // Stable sort keeps the lower destination first on ties.
                outgoing.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());
                for &e in outgoing.iter().take(k) {
                    keep[e] = true;
                }
            }
        }
    }
    let retained: Vec<usize> = (0..pairs.len()).filter(|e| keep[*e]).collect();
    SparseTopology {
        n_nodes,
        edges: retained.iter().map(|&e| pairs[e]).collect(),
        scores: retained.iter().map(|&e| scores[e]).collect(),
        retained,
    }
}

/// Inverse-variance message weights `w = 1 / (sigma + eps)` on the tape;
/// input is the per-edge scalar uncertainty (E, 1).
pub fn edge_message_weights(tape: &mut Tape, sigma: Var, eps: f64) -> Result<Var> {
    let shifted = tape.add_scalar(sigma, eps);
    tape.recip(shifted)
}
