//! Central finite-difference gradient verification.

use crate::error::{CacError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares the analytic gradient returned by `f` at `params` against central
/// differences `(f(p + eps·e_i) − f(p − eps·e_i)) / 2eps`.
///
/// `f` returns `(loss, gradient)`; only the loss is used at perturbed points.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CacError::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(CacError::Numeric(format!("non-finite loss {loss} at base point")));
    }
    if analytic.len() != params.len() {
        return Err(CacError::Dimension {
            op: "grad_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        tolerance,
    };
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let (up, _) = f(&p)?;
        p[i] = orig - eps;
        let (down, _) = f(&p)?;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(CacError::Numeric(format!("non-finite loss perturbing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_err || i == 0 {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
