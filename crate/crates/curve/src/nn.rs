//! Small parameter blocks shared by the encoder, intervention, scoring, and
//! reasoning modules.

use crate::error::Result;
use crate::rng::randn;
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Dense affine layer, `w` is (in, out), `b` is (out).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    pub fn init(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        // Xavier-style scale.
        let std = (2.0 / (inp + out) as f64).sqrt();
        Affine {
            w: randn(vec![inp, out], std, rng),
            b: Tensor::zeros(vec![out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Affine {
            w: Tensor::zeros(vec![inp, out]),
            b: Tensor::zeros(vec![out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAffine {
        BoundAffine {
            w: tape.leaf(self.w.clone(), true),
            b: tape.leaf(self.b.clone(), true),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub w: Var,
    pub b: Var,
}

impl BoundAffine {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add(xw, self.b)
    }
}

/// Two-layer block: affine -> tanh -> affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: Affine,
    pub l2: Affine,
}

impl Mlp2 {
    pub fn init(inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp2 {
            l1: Affine::init(inp, hidden, rng),
            l2: Affine::init(hidden, out, rng),
        }
    }

    pub fn zeros(inp: usize, hidden: usize, out: usize) -> Self {
        Mlp2 {
            l1: Affine::zeros(inp, hidden),
            l2: Affine::zeros(hidden, out),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp2 {
        BoundMlp2 {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp2 {
    pub l1: BoundAffine,
    pub l2: BoundAffine,
}

impl BoundMlp2 {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.l1.apply(tape, x)?;
        let h = tape.tanh(h);
        self.l2.apply(tape, h)
    }
}
