//! Composite training objective: Monte Carlo cross-entropy on noisy logits,
//! uncertainty calibration, prototype diversity, and KL regularization.

use crate::encoder::GaussianPosterior;
use crate::error::{CurveError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Loss weights and objective constants.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_unc: f64,
    pub lambda_div: f64,
    pub lambda_kl: f64,
    /// Monte Carlo samples for the prediction loss.
    pub mc_samples: usize,
    /// Ranking margin between correct and wrong uncertainty.
    pub delta: f64,
    /// Collapse floor for wrong-prediction uncertainty.
    pub u_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_unc: 1.0,
            lambda_div: 1e-2,
            lambda_kl: 1e-3,
            mc_samples: 10,
            delta: 0.1,
            u_min: 0.5,
        }
    }
}

fn one_hot_rows(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data).unwrap()
}

/// Per-sample predicted standard deviation: mean over classes of
/// `exp(logvar / 2)`, shape (B, 1).
pub fn predicted_std(tape: &mut Tape, logvar: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    tape.mean_axis1(sigma)
}

/// Monte Carlo cross-entropy over noisy logits, averaged over draws and the
/// batch. `eps_draws` supplies one (B, C) standard-normal tensor per draw so
/// the loss is a deterministic function of its inputs.
pub fn prediction_loss(
    tape: &mut Tape,
    logits_mu: Var,
    logvar: Var,
    labels: &[usize],
    eps_draws: &[Tensor],
) -> Result<Var> {
    if eps_draws.is_empty() {
        return Err(CurveError::Config("prediction loss needs at least one noise draw".into()));
    }
    let (b, c) = tape.value(logits_mu).dims2();
    if labels.len() != b {
        return Err(CurveError::ShapeMismatch {
            op: "prediction_loss",
            lhs: vec![b, c],
            rhs: vec![labels.len()],
        });
    }
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let targets = tape.constant(one_hot_rows(labels, c));
    let mut terms = Vec::with_capacity(eps_draws.len());
    for eps in eps_draws {
        let e = tape.constant(eps.clone());
        let noise = tape.mul(e, sigma)?;
        let logits = tape.add(logits_mu, noise)?;
        let logp = tape.log_softmax(logits);
        let picked = tape.mul(logp, targets)?;
        let row_ll = tape.mean_axis1(picked); // (B, 1), value = logp[y] / C
        let total = tape.sum(row_ll);
        // mean_axis1 divided by C and sum ran over B rows; rescale to the
        // batch-mean negative log-likelihood.
        terms.push(tape.scale(total, -(c as f64) / b as f64));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / eps_draws.len() as f64))
}

/// Hinge calibration loss. `correct[i]` marks whether sample `i` was
/// predicted correctly from the mean logits. A subset with no members
/// contributes zero to every term that references it.
pub fn calibration_loss(
    tape: &mut Tape,
    logvar: Var,
    correct: &[bool],
    weights: &LossWeights,
) -> Result<Var> {
    let (b, _) = tape.value(logvar).dims2();
    if correct.len() != b {
        return Err(CurveError::ShapeMismatch {
            op: "calibration_loss",
            lhs: vec![b],
            rhs: vec![correct.len()],
        });
    }
    let u = predicted_std(tape, logvar);
    let cor_idx: Vec<usize> = (0..b).filter(|&i| correct[i]).collect();
    let wro_idx: Vec<usize> = (0..b).filter(|&i| !correct[i]).collect();
    if wro_idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let uw = tape.gather_rows(u, &wro_idx)?;
    let u_wro = tape.mean(uw);

    let mut loss = {
        let neg = tape.neg(u_wro);
        let gap = tape.add_scalar(neg, weights.u_min);
        tape.relu(gap)
    };
    if !cor_idx.is_empty() {
        let uc = tape.gather_rows(u, &cor_idx)?;
        let u_cor = tape.mean(uc);
        let diff = tape.sub(u_cor, u_wro)?;
        let margin = tape.add_scalar(diff, weights.delta);
        let rank = tape.relu(margin);
        loss = tape.add(loss, rank)?;
    }
    Ok(loss)
}

/// Frobenius norm of the prototype cosine-similarity matrix minus identity.
pub fn prototype_diversity_loss(tape: &mut Tape, prototypes: Var) -> Result<Var> {
    let (k, r) = tape.value(prototypes).dims2();
    let sq = tape.mul(prototypes, prototypes)?;
    let msq = tape.mean_axis1(sq);
    let nsq = tape.scale(msq, r as f64);
    let guarded = tape.add_scalar(nsq, 1e-24);
    let norm = tape.sqrt(guarded)?;
    let inv = tape.recip(norm)?;
    let unit = tape.scale_rows(prototypes, inv)?;
    let unit_t = tape.transpose(unit);
    let s = tape.matmul(unit, unit_t)?;
    let eye = {
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            d[i * k + i] = 1.0;
        }
        tape.constant(Tensor::matrix(k, k, d).unwrap())
    };
    let diff = tape.sub(s, eye)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    tape.sqrt(total)
}

/// Standard-normal KL summed over every posterior, divided by `batch_size`:
/// `(1 / B) * sum 0.5 * (mu^2 + sigma^2 - logvar - 1)`.
pub fn kl_regularizer(
    tape: &mut Tape,
    posteriors: &[GaussianPosterior],
    batch_size: usize,
) -> Result<Var> {
    if batch_size == 0 {
        return Err(CurveError::Config("kl_regularizer needs a positive batch size".into()));
    }
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for p in posteriors {
        let musq = tape.mul(p.mu, p.mu)?;
        let var = tape.exp(p.logvar);
        let a = tape.add(musq, var)?;
        let b = tape.sub(a, p.logvar)?;
        let c = tape.add_scalar(b, -1.0);
        let s = tape.sum(c);
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 0.5 / batch_size as f64))
}

/// Components of the composite objective, each a scalar on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub pred: Var,
    pub unc: Var,
    pub div: Var,
    pub kl: Var,
}

/// Weighted sum of the components. Errors if any component is non-finite,
/// naming the offender.
pub fn total_objective(
    tape: &mut Tape,
    parts: LossComponents,
    weights: &LossWeights,
) -> Result<Var> {
    for (name, v) in [
        ("pred", parts.pred),
        ("unc", parts.unc),
        ("div", parts.div),
        ("kl", parts.kl),
    ] {
        if !tape.value(v).all_finite() {
            return Err(CurveError::Numeric(format!(
                "loss component '{name}' is not finite: {}",
                tape.value(v).data()[0]
            )));
        }
    }
    let unc = tape.scale(parts.unc, weights.lambda_unc);
    let div = tape.scale(parts.div, weights.lambda_div);
    let kl = tape.scale(parts.kl, weights.lambda_kl);
    let a = tape.add(parts.pred, unc)?;
    let b = tape.add(a, div)?;
    tape.add(b, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::finite_difference_check;
    use crate::rng::{rng_from, standard_normal};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn prediction_loss_matches_dense_reference() {
        let mut rng = rng_from(1);
        let mu = standard_normal(vec![3, 2], &mut rng);
        let lv = standard_normal(vec![3, 2], &mut rng);
        let labels = [0usize, 1, 1];
        let eps: Vec<Tensor> = (0..4).map(|_| standard_normal(vec![3, 2], &mut rng)).collect();

        let mut tape = Tape::new();
        let muv = tape.constant(mu.clone());
        let lvv = tape.constant(lv.clone());
        let loss = prediction_loss(&mut tape, muv, lvv, &labels, &eps).unwrap();

        let mut want = 0.0;
        for e in &eps {
            for i in 0..3 {
                let l: Vec<f64> = (0..2)
                    .map(|c| mu.get(i, c) + e.get(i, c) * (0.5 * lv.get(i, c)).exp())
                    .collect();
                let m = l[0].max(l[1]);
                let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
                want += -(l[labels[i]] - lse);
            }
        }
        want /= 4.0 * 3.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_reduces_to_plain_cross_entropy() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let lv = tape.constant(Tensor::full(vec![2, 2], -40.0));
        let eps = vec![Tensor::full(vec![2, 2], 0.0); 2];
        let loss = prediction_loss(&mut tape, mu, lv, &[0, 1], &eps).unwrap();
        let want = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn calibration_hand_cases() {
        let w = LossWeights::default();

        // All wrong: u_wro = 1 (logvar 0), rank term dropped,
        // collapse max(0, 0.5 - 1) = 0.
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::zeros(vec![2, 2]));
        let loss = calibration_loss(&mut tape, lv, &[false, false], &w).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // Correct sample has std 1, wrong has std e^{-1}.
        // rank = max(0, 1 - e^{-1} + 0.1), collapse = max(0, 0.5 - e^{-1}).
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, -2.0, -2.0]).unwrap());
        let loss = calibration_loss(&mut tape, lv, &[true, false], &w).unwrap();
        let e1 = (-1.0f64).exp();
        let want = (1.0 - e1 + 0.1) + (0.5 - e1);
        assert!((tape.value(loss).item() - want).abs() < 1e-12);

        // All correct: both terms reference the empty wrong set, loss is 0.
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::full(vec![3, 2], 4.0));
        let loss = calibration_loss(&mut tape, lv, &[true, true, true], &w).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn calibration_inactive_hinges_give_zero() {
        // Wrong uncertainty far above both the correct one and the floor.
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::matrix(2, 2, vec![-6.0, -6.0, 2.0, 2.0]).unwrap());
        let loss = calibration_loss(&mut tape, lv, &[true, false], &w).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn diversity_of_orthonormal_rows_is_zero() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(3, 4, vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 2.0, 0.0, 0.0,
            0.0, 0.0, 0.0, -0.5,
        ])
        .unwrap());
        let loss = prototype_diversity_loss(&mut tape, c).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn diversity_of_duplicate_rows_is_sqrt_two() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::matrix(2, 3, vec![
            3.0, 0.0, 0.0,
            3.0, 0.0, 0.0,
        ])
        .unwrap());
        let loss = prototype_diversity_loss(&mut tape, c).unwrap();
        assert!((tape.value(loss).item() - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_form_hand_case() {
        // mu = 1, logvar = 0 gives 0.5 per coordinate.
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 4, vec![1.0; 4]).unwrap());
        let lv = tape.constant(Tensor::zeros(vec![1, 4]));
        let p = GaussianPosterior { mu, logvar: lv };
        let kl = kl_regularizer(&mut tape, &[p], 2).unwrap();
        assert!((tape.value(kl).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        let (mu, lv) = (0.7, -0.4);
        let mut tape = Tape::new();
        let muv = tape.constant(Tensor::matrix(1, 1, vec![mu]).unwrap());
        let lvv = tape.constant(Tensor::matrix(1, 1, vec![lv]).unwrap());
        let p = GaussianPosterior { mu: muv, logvar: lvv };
        let kl = kl_regularizer(&mut tape, &[p], 1).unwrap();
        let closed = tape.value(kl).item();

        let sigma = (0.5 * lv as f64).exp();
        let mut rng = rng_from(99);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = mu + sigma * z;
            let logq = -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln();
            let logp = -0.5 * x * x;
            acc += logq - logp;
        }
        let mc = acc / n as f64;
        assert!((closed - mc).abs() / closed.abs() < 0.01, "closed {closed} vs mc {mc}");
    }

    #[test]
    fn total_combines_with_stated_weights() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let parts = LossComponents { pred: one, unc: one, div: one, kl: one };
        let total = total_objective(&mut tape, parts, &w).unwrap();
        assert!((tape.value(total).item() - 2.011).abs() < 1e-12);
    }

    #[test]
    fn total_rejects_non_finite_component() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let big = tape.constant(Tensor::scalar(1000.0));
        let inf = tape.exp(big);
        let bad = tape.sub(inf, inf).unwrap();
        let parts = LossComponents { pred: one, unc: bad, div: one, kl: one };
        let err = total_objective(&mut tape, parts, &w).unwrap_err();
        assert!(err.to_string().contains("unc"));
    }

    #[test]
    fn finite_differences_confirm_loss_gradients() {
        let mut rng = rng_from(7);
        let mu0 = standard_normal(vec![4, 2], &mut rng);
        let lv0 = standard_normal(vec![4, 2], &mut rng);
        let c0 = standard_normal(vec![3, 5], &mut rng);
        let eps: Vec<Tensor> = (0..3).map(|_| standard_normal(vec![4, 2], &mut rng)).collect();
        let labels = [0usize, 1, 0, 1];
        let correct = [true, false, false, true];
        let w = LossWeights::default();

        let f = |params: &[Tensor]| {
            let mut tape = Tape::new();
            let mu = tape.leaf(params[0].clone(), true);
            let lv = tape.leaf(params[1].clone(), true);
            let c = tape.leaf(params[2].clone(), true);
            let pred = prediction_loss(&mut tape, mu, lv, &labels, &eps).unwrap();
            let unc = calibration_loss(&mut tape, lv, &correct, &w).unwrap();
            let div = prototype_diversity_loss(&mut tape, c).unwrap();
            let post = GaussianPosterior { mu, logvar: lv };
            let kl = kl_regularizer(&mut tape, &[post], 4).unwrap();
            let total =
                total_objective(&mut tape, LossComponents { pred, unc, div, kl }, &w).unwrap();
            let loss = tape.value(total).item();
            let grads = tape.backward(total).unwrap();
            let gs = [mu, lv, c]
                .iter()
                .map(|v| grads.get(*v).cloned().unwrap())
                .collect();
            (loss, gs)
        };
        let report = finite_difference_check(&f, &[mu0, lv0, c0], 1e-5, 1e-6);
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn prediction_loss_decreases_with_confidence() {
        // Sanity direction check: pushing the true-class logit up lowers the
        // loss for random noise draws.
        let mut rng = rng_from(11);
        let eps: Vec<Tensor> = (0..10).map(|_| standard_normal(vec![1, 2], &mut rng)).collect();
        let mut last = f64::INFINITY;
        for scale in [0.0, 1.0, 3.0] {
            let mut tape = Tape::new();
            let mu = tape.constant(Tensor::matrix(1, 2, vec![scale, 0.0]).unwrap());
            let lv = tape.constant(Tensor::full(vec![1, 2], -3.0));
            let loss = prediction_loss(&mut tape, mu, lv, &[0], &eps).unwrap();
            let v = tape.value(loss).item();
            assert!(v < last);
            last = v;
        }
    }
}
