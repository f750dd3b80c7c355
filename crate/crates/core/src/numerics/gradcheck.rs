use super::Tensor;

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compare `analytic` gradients of `f` at `params` against central
/// differences with step `h`.
///
/// Per entry the error is `|a − c| / max(|a|, |c|, 1e-12)`; the report holds
/// the maximum over every entry of every parameter.
pub fn finite_diff_check<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64 + ?Sized,
{
    finite_diff_check_floored(f, params, analytic, h, 1e-12)
}

/// As [`finite_diff_check`] with denominator `max(|a|, |c|, floor)`.
///
/// Gradients that vanish identically (a key bias under softmax, say) leave
/// only rounding noise of order `ε·|f|/h` in the central difference; the
/// floor keeps that noise from reading as a 100% error.
pub fn finite_diff_check_floored<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    floor: f64,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64 + ?Sized,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(
        params.len(),
        analytic.len(),
        "one analytic gradient per parameter"
    );
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape(), "gradient shape mismatch");
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = f(&work);
            work[pi].data_mut()[e] = orig - h;
            let minus = f(&work);
            work[pi].data_mut()[e] = orig;

            let central = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let denom = a.abs().max(central.abs()).max(floor);
            let rel = (a - central).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    report
}
