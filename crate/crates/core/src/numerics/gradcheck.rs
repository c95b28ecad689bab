//! Central finite-difference gradient checking.

/// Outcome of a gradient check over every coordinate of a parameter vector.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Denominator floor: coordinates whose gradient magnitude is below this are
/// judged on absolute error, where finite differences are dominated by roundoff.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every coordinate.
///
/// `loss_fn` must be deterministic. It is evaluated `2·params.len()` times.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient shape mismatch");
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
        failures: Vec::new(),
        tolerance,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let up = loss_fn(&theta);
        theta[i] = orig - step;
        let down = loss_fn(&theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        let abs = (analytic[i] - numeric).abs();
        if !(rel <= tolerance) {
            report.failures.push(i);
        }
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradient() {
        let r = grad_check(|_| 3.5, &[1.0, -2.0], &[0.0, 0.0], 1e-5, 1e-4);
        assert!(r.passed());
        assert_eq!(r.max_abs_error, 0.0);
    }

    #[test]
    fn quadratic_gradient_is_theta() {
        let theta = [0.3, -1.7, 2.2, 0.0];
        let r = grad_check(
            |t| 0.5 * t.iter().map(|x| x * x).sum::<f64>(),
            &theta,
            &theta,
            1e-5,
            1e-4,
        );
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let theta = [1.0, 2.0];
        let r = grad_check(|t| t[0] * t[1], &theta, &[2.0, 0.0], 1e-5, 1e-4);
        assert!(!r.passed());
        assert_eq!(r.failures, vec![1]);
    }
}
