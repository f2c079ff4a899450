//! Central finite-difference gradient checking.

/// Step used by the reference checks.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative tolerance used by the reference checks.
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Magnitude below which the relative error is measured against this floor
/// instead of the gradient itself.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            rel_tol: DEFAULT_REL_TOL,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Index of the coordinate with the largest relative error.
    pub worst: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passed(&self, config: &GradCheckConfig) -> bool {
        self.max_rel_error <= config.rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Compares an analytic gradient with central differences of `f` at `x`.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], config: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match the point");
    let numeric = central_difference(f, x, config.step);
    let mut report = GradCheckReport {
        checked: x.len(),
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n, config.floor);
        if report.worst.is_none() || err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = [1.0, -2.0, 0.5];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = check_gradient(|p| p.iter().map(|v| v * v).sum(), &x, &analytic, &GradCheckConfig::default());
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0];
        let r = check_gradient(|p| p[0].powi(3), &x, &[2.0], &GradCheckConfig::default());
        assert!(!r.passed(&GradCheckConfig::default()));
        assert_eq!(r.worst, Some(0));
    }
}
