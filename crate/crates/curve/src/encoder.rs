//! Variational scene-graph encoder: entity and relation diagonal-Gaussian
//! posteriors plus reparameterized sampling.
//!
//! Entity posteriors come from two independent two-layer heads over the
//! 15-dim object features; relation posteriors from heads over the
//! concatenation `[z_i; z_j]` of the two entity samples. Relations are
//! directed: (i, j) and (j, i) are distinct.

use crate::error::Result;
use crate::nn::Mlp2;
use crate::tensor::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Log-variance heads are clamped to this range before exponentiation, so
/// sigma stays within [e^-5, e^5].
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Diagonal Gaussian `N(mu, diag(exp(logvar)))` as tape values.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub g_mu: Mlp2,
    pub g_sigma: Mlp2,
    pub h_mu: Mlp2,
    pub h_sigma: Mlp2,
}

impl EncoderParams {
    pub fn init(feat: usize, hidden: usize, d: usize, rel: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            g_mu: Mlp2::init(feat, hidden, d, rng),
            g_sigma: Mlp2::init(feat, hidden, d, rng),
            h_mu: Mlp2::init(2 * d, hidden, rel, rng),
            h_sigma: Mlp2::init(2 * d, hidden, rel, rng),
        }
    }

    pub fn entity_dim(&self) -> usize {
        self.g_mu.l2.out_dim()
    }

    pub fn relation_dim(&self) -> usize {
        self.h_mu.l2.out_dim()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.g_mu.visit(&format!("{prefix}.g_mu"), f);
        self.g_sigma.visit(&format!("{prefix}.g_sigma"), f);
        self.h_mu.visit(&format!("{prefix}.h_mu"), f);
        self.h_sigma.visit(&format!("{prefix}.h_sigma"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.g_mu.visit_mut(&format!("{prefix}.g_mu"), f);
        self.g_sigma.visit_mut(&format!("{prefix}.g_sigma"), f);
        self.h_mu.visit_mut(&format!("{prefix}.h_mu"), f);
        self.h_sigma.visit_mut(&format!("{prefix}.h_sigma"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub g_mu: crate::nn::BoundMlp2,
    pub g_sigma: crate::nn::BoundMlp2,
    pub h_mu: crate::nn::BoundMlp2,
    pub h_sigma: crate::nn::BoundMlp2,
}

impl EncoderParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            g_mu: self.g_mu.bind(tape),
            g_sigma: self.g_sigma.bind(tape),
            h_mu: self.h_mu.bind(tape),
            h_sigma: self.h_sigma.bind(tape),
        }
    }
}

/// Entity posteriors for a batch of feature rows (N x 15).
pub fn encode_entity_posterior(
    tape: &mut Tape,
    enc: &BoundEncoder,
    features: Var,
) -> Result<GaussianPosterior> {
    let mu = enc.g_mu.apply(tape, features)?;
    let logvar = enc.g_sigma.apply(tape, features)?;
    let logvar = tape.clip(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok(GaussianPosterior { mu, logvar })
}

/// Relation posteriors from stacked ordered-pair samples `[z_i; z_j]`
/// (P x 2d). The first d columns carry the source entity.
pub fn encode_relation_posterior(
    tape: &mut Tape,
    enc: &BoundEncoder,
    pair_inputs: Var,
) -> Result<GaussianPosterior> {
    let mu = enc.h_mu.apply(tape, pair_inputs)?;
    let logvar = enc.h_sigma.apply(tape, pair_inputs)?;
    let logvar = tape.clip(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok(GaussianPosterior { mu, logvar })
}

/// `z = mu + exp(logvar / 2) * eps`; gradients flow to mu and logvar only.
pub fn reparameterize_sample(
    tape: &mut Tape,
    post: GaussianPosterior,
    eps: Tensor,
) -> Result<Var> {
    let eps = tape.constant(eps);
    let half = tape.scale(post.logvar, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    tape.add(post.mu, noise)
}

/// Log-density of a diagonal Gaussian at `x` (used by the factorization
/// check, not by training).
pub fn gaussian_log_density(mu: &[f64], logvar: &[f64], x: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    mu.iter()
        .zip(logvar.iter())
        .zip(x.iter())
        .map(|((m, lv), x)| {
            let var = lv.exp();
            -0.5 * (ln_2pi + lv + (x - m) * (x - m) / var)
        })
        .sum()
}
