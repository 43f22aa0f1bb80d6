//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over scalar entries of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares the analytic gradients returned by `f` against central differences.
///
/// `f` maps a full parameter set to `(loss, gradients)`; it must be
/// deterministic. The base point is evaluated twice and any bitwise
/// disagreement invalidates the check.
pub fn grad_check<F>(mut f: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {eps}")));
    }
    let (v1, analytic) = f(params)?;
    let (v2, analytic2) = f(params)?;
    if v1.to_bits() != v2.to_bits() || analytic != analytic2 {
        return Err(Error::Usage(
            "gradient check invalid: function is not deterministic at the base point".into(),
        ));
    }
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| !g.same_shape(p))
    {
        return Err(Error::dim("grad_check", "gradient shapes do not match parameters"));
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries_checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let (plus, _) = f(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let (minus, _) = f(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient check at parameter {pi}, entry {ei}"
                )));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
