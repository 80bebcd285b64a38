//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every primitive application in creation order; calling
//! [`Tape::backward`] on a scalar node walks the records in strict reverse
//! order once and accumulates gradients into every `requires_grad` leaf.
//! Tensors are rank-1 or rank-2, row-major, double precision throughout.

use crate::error::{CurveError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || n != data.len() {
            return Err(CurveError::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// (rows, cols) view; rank-1 tensors behave as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { bcast: bool },
    Sub { bcast: bool },
    Mul,
    Div,
    Scale(f64),
    AddScalar(#[allow(dead_code)] f64),
    Matmul,
    Transpose,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    Abs,
    Recip,
    Clip { lo: f64, hi: f64 },
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    MeanAxis0,
    MeanAxis1,
    BroadcastRows,
    ConcatCols { widths: Vec<usize> },
    SliceCols { start: usize, end: usize },
    GatherRows { idx: Vec<usize>, src_rows: usize },
    ScatterAddRows { idx: Vec<usize> },
    ScaleRows,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// A tensor handle onto a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradients from one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> CurveError {
    CurveError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------
    // elementwise binary
    // ------------------------------------------------------------------

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        // `bcast`: b is a rank-1 bias applied to every row of a.
        let (ra, ca) = ta.dims2();
        let (rb, cb) = tb.dims2();
        if ra == rb && ca == cb {
            Ok((ta.clone(), false))
        } else if rb == 1 && cb == ca {
            Ok((ta.clone(), true))
        } else {
            Err(shape_err(op_name, ta, tb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, bcast) = self.binary("add", a, b)?;
        let tb = &self.nodes[b.0].value;
        let cb = out.dims2().1;
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += tb.data[if bcast { i % cb } else { i }];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add { bcast }, vec![a.0, b.0], out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, bcast) = self.binary("sub", a, b)?;
        let tb = &self.nodes[b.0].value;
        let cb = out.dims2().1;
        for (i, v) in out.data.iter_mut().enumerate() {
            *v -= tb.data[if bcast { i % cb } else { i }];
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub { bcast }, vec![a.0, b.0], out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() && ta.dims2() != tb.dims2() {
            return Err(shape_err("mul", ta, tb));
        }
        let mut out = ta.clone();
        for (v, w) in out.data.iter_mut().zip(tb.data.iter()) {
            *v *= w;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul, vec![a.0, b.0], out, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() && ta.dims2() != tb.dims2() {
            return Err(shape_err("div", ta, tb));
        }
        if tb.data.iter().any(|v| *v == 0.0) {
            return Err(CurveError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let mut out = ta.clone();
        for (v, w) in out.data.iter_mut().zip(tb.data.iter()) {
            *v /= w;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Div, vec![a.0, b.0], out, rg))
    }

    // ------------------------------------------------------------------
    // scalar-parameter ops
    // ------------------------------------------------------------------

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(c), vec![a.0], out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|v| *v += c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(c), vec![a.0], out, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ------------------------------------------------------------------
    // matrix ops
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let out = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Matmul, vec![a.0, b.0], out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data[i * n + j];
            }
        }
        let out = Tensor {
            shape: vec![n, m],
            data,
        };
        let rg = self.rg(&[a]);
        self.push(Op::Transpose, vec![a.0], out, rg)
    }

    // ------------------------------------------------------------------
    // elementwise unary
    // ------------------------------------------------------------------

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(&[a]);
        self.push(op, vec![a.0], out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data.iter().any(|v| *v <= 0.0) {
            return Err(CurveError::Domain {
                op: "ln",
                msg: "log of non-positive value".into(),
            });
        }
        Ok(self.unary(Op::Ln, a, f64::ln))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data.iter().any(|v| *v < 0.0) {
            return Err(CurveError::Domain {
                op: "sqrt",
                msg: "sqrt of negative value".into(),
            });
        }
        Ok(self.unary(Op::Sqrt, a, f64::sqrt))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs, a, f64::abs)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data.iter().any(|v| *v == 0.0) {
            return Err(CurveError::Domain {
                op: "recip",
                msg: "reciprocal of zero".into(),
            });
        }
        Ok(self.unary(Op::Recip, a, f64::recip))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval and
    /// is zero outside (documented subgradient choice).
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clip { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    // ------------------------------------------------------------------
    // row-wise softmax family (numerically stable via max subtraction)
    // ------------------------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2();
        let mut out = ta.clone();
        for r in 0..m {
            let row = &mut out.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(&[a]);
        self.push(Op::Softmax, vec![a.0], out, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2();
        let mut out = ta.clone();
        for r in 0..m {
            let row = &mut out.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (*v - mx).exp()).sum::<f64>().ln() + mx;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(Op::LogSoftmax, vec![a.0], out, rg)
    }

    // ------------------------------------------------------------------
    // reductions
    // ------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum, vec![a.0], Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean, vec![a.0], Tensor::scalar(s), rg)
    }

    /// Column means: (m, n) -> (1, n).
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                data[c] += t.data[r * n + c];
            }
        }
        data.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor {
            shape: vec![1, n],
            data,
        };
        let rg = self.rg(&[a]);
        self.push(Op::MeanAxis0, vec![a.0], out, rg)
    }

    /// Row means: (m, n) -> (m, 1).
    pub fn mean_axis1(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let data: Vec<f64> = (0..m)
            .map(|r| t.data[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let out = Tensor {
            shape: vec![m, 1],
            data,
        };
        let rg = self.rg(&[a]);
        self.push(Op::MeanAxis1, vec![a.0], out, rg)
    }

    /// Repeat a single-row tensor m times: (1, n) -> (m, n).
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, n) = t.dims2();
        if r != 1 {
            return Err(CurveError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, n],
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&t.data);
        }
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::BroadcastRows, vec![a.0], out, rg))
    }

    // ------------------------------------------------------------------
    // structural ops
    // ------------------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CurveError::Tape("concat_cols of zero tensors".into()));
        }
        let m = self.nodes[parts[0].0].value.dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.nodes[p.0].value.dims2();
            if r != m {
                return Err(shape_err(
                    "concat_cols",
                    &self.nodes[parts[0].0].value,
                    &self.nodes[p.0].value,
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, w) in parts.iter().zip(widths.iter()) {
                let t = &self.nodes[p.0].value;
                data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor {
            shape: vec![m, total],
            data,
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatCols { widths },
            parts.iter().map(|v| v.0).collect(),
            out,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if start >= end || end > n {
            return Err(CurveError::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&t.data[r * n + start..r * n + end]);
        }
        let out = Tensor {
            shape: vec![m, end - start],
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols { start, end }, vec![a.0], out, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if idx.iter().any(|i| *i >= m) {
            return Err(CurveError::Domain {
                op: "gather_rows",
                msg: format!("index out of range for {m} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&t.data[i * n..(i + 1) * n]);
        }
        let out = Tensor {
            shape: vec![idx.len(), n],
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::GatherRows {
                idx: idx.to_vec(),
                src_rows: m,
            },
            vec![a.0],
            out,
            rg,
        ))
    }

    /// `out[idx[e], :] += a[e, :]` over `out_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if idx.len() != m || idx.iter().any(|i| *i >= out_rows) {
            return Err(CurveError::Domain {
                op: "scatter_add_rows",
                msg: format!("{} indices for {} rows into {}", idx.len(), m, out_rows),
            });
        }
        let mut data = vec![0.0; out_rows * n];
        for (e, &i) in idx.iter().enumerate() {
            for c in 0..n {
                data[i * n + c] += t.data[e * n + c];
            }
        }
        let out = Tensor {
            shape: vec![out_rows, n],
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::ScatterAddRows { idx: idx.to_vec() }, vec![a.0], out, rg))
    }

    /// `out[e, :] = a[e, :] * w[e]` with `w` of shape (m, 1) or rank-1 length m.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        let (m, n) = ta.dims2();
        let (wr, wc) = tw.dims2();
        let w_len = wr * wc;
        if !(w_len == m && (wr == m || wr == 1)) {
            return Err(shape_err("scale_rows", ta, tw));
        }
        let mut out = ta.clone();
        for r in 0..m {
            let s = tw.data[r];
            out.data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(&[a, w]);
        Ok(self.push(Op::ScaleRows, vec![a.0, w.0], out, rg))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Backpropagate from a scalar loss; the tape is consumed (a second
    /// backward on the same tape is an error).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(CurveError::Tape(
                "backward called twice on the same tape".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CurveError::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += b;
                }
            }
            slot => {
                let mut t = delta;
                t.shape = self.nodes[id].value.shape.clone();
                *slot = Some(t);
            }
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let inp = &node.inputs;
        let val = |i: usize| -> &Tensor { &self.nodes[inp[i]].value };
        match &node.op {
            Op::Leaf => {}
            Op::Add { bcast } => {
                self.accumulate(grads, inp[0], g.clone());
                self.accumulate(grads, inp[1], reduce_bias(g, val(1), *bcast));
            }
            Op::Sub { bcast } => {
                self.accumulate(grads, inp[0], g.clone());
                let mut d = reduce_bias(g, val(1), *bcast);
                d.data.iter_mut().for_each(|v| *v = -*v);
                self.accumulate(grads, inp[1], d);
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                self.accumulate(grads, inp[0], zip_map(g, b, |g, b| g * b));
                self.accumulate(grads, inp[1], zip_map(g, a, |g, a| g * a));
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                self.accumulate(grads, inp[0], zip_map(g, b, |g, b| g / b));
                let mut d = g.clone();
                for ((d, a), b) in d.data.iter_mut().zip(a.data.iter()).zip(b.data.iter()) {
                    *d = -*d * a / (b * b);
                }
                self.accumulate(grads, inp[1], d);
            }
            Op::Scale(c) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, inp[0], d);
            }
            Op::AddScalar(_) => self.accumulate(grads, inp[0], g.clone()),
            Op::Matmul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = a.dims2();
                let n = b.dims2().1;
                // da = g . b^T
                let bt = transpose_raw(&b.data, k, n);
                let da = matmul_raw(&g.data, &bt, m, n, k);
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: vec![m, k],
                        data: da,
                    },
                );
                // db = a^T . g
                let at = transpose_raw(&a.data, m, k);
                let db = matmul_raw(&at, &g.data, k, m, n);
                self.accumulate(
                    grads,
                    inp[1],
                    Tensor {
                        shape: vec![k, n],
                        data: db,
                    },
                );
            }
            Op::Transpose => {
                let (m, n) = node.value.dims2();
                let d = transpose_raw(&g.data, m, n);
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: vec![n, m],
                        data: d,
                    },
                );
            }
            Op::Exp => self.accumulate(grads, inp[0], zip_map(g, &node.value, |g, y| g * y)),
            Op::Ln => self.accumulate(grads, inp[0], zip_map(g, val(0), |g, x| g / x)),
            Op::Tanh => {
                self.accumulate(grads, inp[0], zip_map(g, &node.value, |g, y| g * (1.0 - y * y)))
            }
            Op::Sigmoid => self.accumulate(
                grads,
                inp[0],
                zip_map(g, &node.value, |g, y| g * y * (1.0 - y)),
            ),
            Op::Relu => self.accumulate(
                grads,
                inp[0],
                zip_map(g, val(0), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Sqrt => self.accumulate(
                grads,
                inp[0],
                zip_map(g, &node.value, |g, y| if y > 0.0 { g * 0.5 / y } else { 0.0 }),
            ),
            Op::Abs => self.accumulate(grads, inp[0], zip_map(g, val(0), |g, x| g * x.signum() * (x != 0.0) as u8 as f64)),
            Op::Recip => self.accumulate(grads, inp[0], zip_map(g, &node.value, |g, y| -g * y * y)),
            Op::Clip { lo, hi } => self.accumulate(
                grads,
                inp[0],
                zip_map(g, val(0), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::Softmax => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let mut d = g.clone();
                for r in 0..m {
                    let yr = &y.data[r * n..(r + 1) * n];
                    let gr = &g.data[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        d.data[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, inp[0], d);
            }
            Op::LogSoftmax => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let mut d = g.clone();
                for r in 0..m {
                    let gr_sum: f64 = g.data[r * n..(r + 1) * n].iter().sum();
                    for c in 0..n {
                        let p = y.data[r * n + c].exp();
                        d.data[r * n + c] = g.data[r * n + c] - p * gr_sum;
                    }
                }
                self.accumulate(grads, inp[0], d);
            }
            Op::Sum => {
                let x = val(0);
                self.accumulate(grads, inp[0], Tensor::full(x.shape.clone(), g.item()));
            }
            Op::Mean => {
                let x = val(0);
                let v = g.item() / x.len() as f64;
                self.accumulate(grads, inp[0], Tensor::full(x.shape.clone(), v));
            }
            Op::MeanAxis0 => {
                let x = val(0);
                let (m, n) = x.dims2();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend(g.data.iter().map(|v| v / m as f64));
                }
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::MeanAxis1 => {
                let x = val(0);
                let (m, n) = x.dims2();
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    let v = g.data[r] / n as f64;
                    data[r * n..(r + 1) * n].iter_mut().for_each(|d| *d = v);
                }
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::BroadcastRows => {
                let x = val(0);
                let n = x.dims2().1;
                let (m, _) = node.value.dims2();
                let mut data = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        data[c] += g.data[r * n + c];
                    }
                }
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::ConcatCols { widths } => {
                let (m, total) = node.value.dims2();
                let mut start = 0usize;
                for (k, &w) in widths.iter().enumerate() {
                    let mut data = Vec::with_capacity(m * w);
                    for r in 0..m {
                        data.extend_from_slice(&g.data[r * total + start..r * total + start + w]);
                    }
                    self.accumulate(
                        grads,
                        inp[k],
                        Tensor {
                            shape: self.nodes[inp[k]].value.shape.clone(),
                            data,
                        },
                    );
                    start += w;
                }
            }
            Op::SliceCols { start, end } => {
                let x = val(0);
                let (m, n) = x.dims2();
                let w = end - start;
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    data[r * n + start..r * n + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: x.shape.clone(),
                        data,
                    },
                );
            }
            Op::GatherRows { idx, src_rows } => {
                let n = node.value.dims2().1;
                let mut data = vec![0.0; src_rows * n];
                for (e, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        data[i * n + c] += g.data[e * n + c];
                    }
                }
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: self.nodes[inp[0]].value.shape.clone(),
                        data,
                    },
                );
            }
            Op::ScatterAddRows { idx } => {
                let n = node.value.dims2().1;
                let mut data = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    data.extend_from_slice(&g.data[i * n..(i + 1) * n]);
                }
                self.accumulate(
                    grads,
                    inp[0],
                    Tensor {
                        shape: self.nodes[inp[0]].value.shape.clone(),
                        data,
                    },
                );
            }
            Op::ScaleRows => {
                let (a, w) = (val(0), val(1));
                let (m, n) = a.dims2();
                let mut da = g.clone();
                for r in 0..m {
                    let s = w.data[r];
                    da.data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, inp[0], da);
                let dw: Vec<f64> = (0..m)
                    .map(|r| {
                        g.data[r * n..(r + 1) * n]
                            .iter()
                            .zip(a.data[r * n..(r + 1) * n].iter())
                            .map(|(g, a)| g * a)
                            .sum()
                    })
                    .collect();
                self.accumulate(
                    grads,
                    inp[1],
                    Tensor {
                        shape: w.shape.clone(),
                        data: dw,
                    },
                );
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = g.clone();
    for (o, x) in out.data.iter_mut().zip(x.data.iter()) {
        *o = f(*o, *x);
    }
    out
}

/// Reduce an output-shaped gradient back to the bias shape when the forward
/// broadcast a rank-1 bias over rows.
fn reduce_bias(g: &Tensor, b: &Tensor, bcast: bool) -> Tensor {
    if !bcast {
        return g.clone();
    }
    let (m, n) = g.dims2();
    let mut data = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            data[c] += g.data[r * n + c];
        }
    }
    Tensor {
        shape: b.shape.clone(),
        data,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
