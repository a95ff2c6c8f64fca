//! Central-difference verification of analytic gradients.

use super::NumError;

const H: f64 = 1e-5;

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub loss: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// (group, index) of the worst entry.
    pub worst: (usize, usize),
}

/// Compares the gradients returned by `f` against central finite differences
/// (h = 1e-5) at the given point. Relative error per entry is
/// |a - n| / max(|a|, |n|, 1e-8).
///
/// `f` must be deterministic across calls: fixed seeds and fixed dropout
/// masks, or the differences are meaningless.
pub fn grad_check<F>(mut f: F, params: &mut [Vec<f64>], tolerance: f64) -> Result<GradCheckReport, NumError>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), NumError>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(NumError::NonFiniteLoss(loss));
    }
    assert_eq!(analytic.len(), params.len(), "gradient group count mismatch");
    let mut max_rel = 0.0;
    let mut worst = (0, 0);
    for gi in 0..params.len() {
        assert_eq!(analytic[gi].len(), params[gi].len(), "gradient length mismatch in group {gi}");
        for k in 0..params[gi].len() {
            let orig = params[gi][k];
            params[gi][k] = orig + H;
            let (lp, _) = f(params)?;
            params[gi][k] = orig - H;
            let (lm, _) = f(params)?;
            params[gi][k] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(NumError::NonFiniteLoss(if lp.is_finite() { lm } else { lp }));
            }
            let numeric = (lp - lm) / (2.0 * H);
            let a = analytic[gi][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (gi, k);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, loss, tolerance, passed: max_rel < tolerance, worst })
}
