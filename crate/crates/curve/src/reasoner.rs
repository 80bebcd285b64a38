//! Spatiotemporal reasoning: uncertainty-weighted message passing per frame,
//! mean pooling, an LSTM over pooled frame vectors, and a prediction head
//! that emits class logits with a data-dependent log-variance.

use crate::encoder::LOGVAR_CLAMP;
use crate::error::{CurveError, Result};
use crate::nn::{Affine, BoundAffine, BoundMlp2, Mlp2};
use crate::rng::randn;
use crate::structure::{SparseTopology, WEIGHT_EPSILON};
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub const MESSAGE_PASSING_LAYERS: usize = 2;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerParams {
    /// Self-loop transform, (d, d).
    pub w_self: Tensor,
    /// Message network over [h_j; z_ij], shared across layers.
    pub msg: Mlp2,
    /// LSTM input-to-gates, (d, 4 * hidden); gate order is i, f, g, o.
    pub lstm_wx: Tensor,
    /// LSTM hidden-to-gates, (hidden, 4 * hidden).
    pub lstm_wh: Tensor,
    /// LSTM gate bias, (4 * hidden).
    pub lstm_b: Tensor,
    /// Temporal projection, hidden -> proj, tanh.
    pub proj: Affine,
    /// Shared head trunk, proj -> head_hidden, tanh.
    pub head: Affine,
    pub head_mu: Affine,
    pub head_logvar: Affine,
}

impl ReasonerParams {
    pub fn init(
        d: usize,
        rel: usize,
        msg_hidden: usize,
        lstm_hidden: usize,
        lstm_proj: usize,
        head_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gate = 4 * lstm_hidden;
        ReasonerParams {
            w_self: randn(vec![d, d], (2.0 / (2 * d) as f64).sqrt(), rng),
            msg: Mlp2::init(d + rel, msg_hidden, d, rng),
            lstm_wx: randn(vec![d, gate], (2.0 / (d + gate) as f64).sqrt(), rng),
            lstm_wh: randn(
                vec![lstm_hidden, gate],
                (2.0 / (lstm_hidden + gate) as f64).sqrt(),
                rng,
            ),
            lstm_b: Tensor::zeros(vec![gate]),
            proj: Affine::init(lstm_hidden, lstm_proj, rng),
            head: Affine::init(lstm_proj, head_hidden, rng),
            head_mu: Affine::init(head_hidden, NUM_CLASSES, rng),
            head_logvar: Affine::init(head_hidden, NUM_CLASSES, rng),
        }
    }

    pub fn lstm_hidden(&self) -> usize {
        self.lstm_wh.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundReasoner {
        BoundReasoner {
            w_self: tape.leaf(self.w_self.clone(), true),
            msg: self.msg.bind(tape),
            lstm_wx: tape.leaf(self.lstm_wx.clone(), true),
            lstm_wh: tape.leaf(self.lstm_wh.clone(), true),
            lstm_b: tape.leaf(self.lstm_b.clone(), true),
            proj: self.proj.bind(tape),
            head: self.head.bind(tape),
            head_mu: self.head_mu.bind(tape),
            head_logvar: self.head_logvar.bind(tape),
            hidden: self.lstm_hidden(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_self"), &self.w_self);
        self.msg.visit(&format!("{prefix}.msg"), f);
        f(format!("{prefix}.lstm_wx"), &self.lstm_wx);
        f(format!("{prefix}.lstm_wh"), &self.lstm_wh);
        f(format!("{prefix}.lstm_b"), &self.lstm_b);
        self.proj.visit(&format!("{prefix}.proj"), f);
        self.head.visit(&format!("{prefix}.head"), f);
        self.head_mu.visit(&format!("{prefix}.head_mu"), f);
        self.head_logvar.visit(&format!("{prefix}.head_logvar"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_self"), &mut self.w_self);
        self.msg.visit_mut(&format!("{prefix}.msg"), f);
        f(format!("{prefix}.lstm_wx"), &mut self.lstm_wx);
        f(format!("{prefix}.lstm_wh"), &mut self.lstm_wh);
        f(format!("{prefix}.lstm_b"), &mut self.lstm_b);
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
        self.head.visit_mut(&format!("{prefix}.head"), f);
        self.head_mu.visit_mut(&format!("{prefix}.head_mu"), f);
        self.head_logvar.visit_mut(&format!("{prefix}.head_logvar"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundReasoner {
    pub w_self: Var,
    pub msg: BoundMlp2,
    pub lstm_wx: Var,
    pub lstm_wh: Var,
    pub lstm_b: Var,
    pub proj: BoundAffine,
    pub head: BoundAffine,
    pub head_mu: BoundAffine,
    pub head_logvar: BoundAffine,
    hidden: usize,
}

/// One frame of message passing over the retained topology.
///
/// Each node update is
/// `h_i <- relu(W_self h_i + sum_j w_ij m_ij / (sum_j w_ij + eps))`
/// where the sums run over retained edges (i, j) and
/// `m_ij = MLP([h_j; z_ij])`. Nodes with no retained incoming edge keep only
/// the self term. `edge_scale`, when given, multiplies each message by its
/// per-edge confidence score so scores of retained edges stay on the
/// gradient path even though selection itself is discrete. `dropout_masks`,
/// when given, holds one pre-scaled inverted mask per layer applied to the
/// updated embeddings.
pub fn propagate_messages(
    tape: &mut Tape,
    reasoner: &BoundReasoner,
    h0: Var,
    rel_z: Var,
    weights: Var,
    topo: &SparseTopology,
    edge_scale: Option<Var>,
    dropout_masks: Option<&[Var]>,
) -> Result<Var> {
    let n = topo.n_nodes;
    if let Some(masks) = dropout_masks {
        if masks.len() != MESSAGE_PASSING_LAYERS {
            return Err(CurveError::Config(format!(
                "expected {MESSAGE_PASSING_LAYERS} dropout masks, got {}",
                masks.len()
            )));
        }
    }
    let src: Vec<usize> = topo.edges.iter().map(|&(i, _)| i).collect();
    let dst: Vec<usize> = topo.edges.iter().map(|&(_, j)| j).collect();

    let mut h = h0;
    for layer in 0..MESSAGE_PASSING_LAYERS {
        let self_term = tape.matmul(h, reasoner.w_self)?;
        let mut pre = self_term;
        if !topo.edges.is_empty() {
            let h_nbr = tape.gather_rows(h, &dst)?;
            let msg_in = tape.concat_cols(&[h_nbr, rel_z])?;
            let mut m = reasoner.msg.apply(tape, msg_in)?;
            if let Some(s) = edge_scale {
                m = tape.scale_rows(m, s)?;
            }
            let weighted = tape.scale_rows(m, weights)?;
            let num = tape.scatter_add_rows(weighted, &src, n)?;
            let denom = tape.scatter_add_rows(weights, &src, n)?;
            let denom = tape.add_scalar(denom, WEIGHT_EPSILON);
            let inv = tape.recip(denom)?;
            let agg = tape.scale_rows(num, inv)?;
            pre = tape.add(self_term, agg)?;
        }
        h = tape.relu(pre);
        if let Some(masks) = dropout_masks {
            h = tape.mul(h, masks[layer])?;
        }
    }
    Ok(h)
}

/// Mean-pool node embeddings (N, d) into a single graph vector (1, d).
pub fn pool_graph(tape: &mut Tape, h: Var) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    if shape[0] == 0 {
        return Err(CurveError::Domain {
            op: "pool_graph",
            msg: "cannot pool an empty graph".into(),
        });
    }
    Ok(tape.mean_axis0(h))
}

/// Run the LSTM over pooled frame vectors (each (1, d)) and return the final
/// hidden state (1, hidden). Gates are ordered i, f, g, o in the weight
/// matrices; the initial hidden and cell states are zero.
pub fn lstm_aggregate(tape: &mut Tape, reasoner: &BoundReasoner, pooled: &[Var]) -> Result<Var> {
    if pooled.is_empty() {
        return Err(CurveError::Domain {
            op: "lstm_aggregate",
            msg: "empty sequence".into(),
        });
    }
    let hd = reasoner.hidden;
    let mut h = tape.constant(Tensor::zeros(vec![1, hd]));
    let mut c = tape.constant(Tensor::zeros(vec![1, hd]));
    for &g in pooled {
        let gx = tape.matmul(g, reasoner.lstm_wx)?;
        let gh = tape.matmul(h, reasoner.lstm_wh)?;
        let pre0 = tape.add(gx, gh)?;
        let pre = tape.add(pre0, reasoner.lstm_b)?;
        let i_g = tape.slice_cols(pre, 0, hd)?;
        let f_g = tape.slice_cols(pre, hd, 2 * hd)?;
        let g_g = tape.slice_cols(pre, 2 * hd, 3 * hd)?;
        let o_g = tape.slice_cols(pre, 3 * hd, 4 * hd)?;
        let i_g = tape.sigmoid(i_g);
        let f_g = tape.sigmoid(f_g);
        let g_g = tape.tanh(g_g);
        let o_g = tape.sigmoid(o_g);
        let keep = tape.mul(f_g, c)?;
        let write = tape.mul(i_g, g_g)?;
        c = tape.add(keep, write)?;
        let ct = tape.tanh(c);
        h = tape.mul(o_g, ct)?;
    }
    Ok(h)
}

/// Sequence-level output: class logit means and per-class log-variances.
#[derive(Debug, Clone, Copy)]
pub struct PredictionHead {
    pub logits_mu: Var,
    pub logvar: Var,
}

/// Map the final LSTM state to logits and clamped log-variances.
pub fn predict_with_uncertainty(
    tape: &mut Tape,
    reasoner: &BoundReasoner,
    h_last: Var,
) -> Result<PredictionHead> {
    let p = reasoner.proj.apply(tape, h_last)?;
    let p = tape.tanh(p);
    let t = reasoner.head.apply(tape, p)?;
    let t = tape.tanh(t);
    let logits_mu = reasoner.head_mu.apply(tape, t)?;
    let raw_lv = reasoner.head_logvar.apply(tape, t)?;
    let logvar = tape.clip(raw_lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok(PredictionHead { logits_mu, logvar })
}

/// Predicted class from logit means; exact ties resolve to class 0.
pub fn predicted_class(logits_mu: &Tensor) -> usize {
    let d = logits_mu.data();
    if d[1] > d[0] {
        1
    } else {
        0
    }
}
