//! Central finite-difference gradient verification.
//!
//! `f` must be deterministic given fixed parameters: any noise tensors have
//! to be captured by the closure, never sampled inside it.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub per_param: Vec<FdParamReport>,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compare analytic gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h`, elementwise over every parameter.
///
/// `f` returns the loss value and the analytic gradient of the loss with
/// respect to each parameter (same order as `params`); only the loss value
/// is used at perturbed points. Failures are reported, never raised.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> FdReport
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "analytic gradient count must match parameter count"
    );

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;

    for (pi, grad) in analytic.iter().enumerate() {
        let mut report = FdParamReport {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let (fp, _) = f(&work);
            work[pi].data_mut()[ei] = orig - h;
            let (fm, _) = f(&work);
            work[pi].data_mut()[ei] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[ei];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_index = ei;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
        max_rel = max_rel.max(report.max_rel_err);
        per_param.push(report);
    }

    FdReport {
        max_rel_err: max_rel,
        tol,
        per_param,
    }
}
