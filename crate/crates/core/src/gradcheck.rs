//! Central finite-difference gradient checking.
//!
//! The numeric side here is deliberately independent of [`crate::graph`]: it
//! only re-evaluates a black-box objective at perturbed inputs, so it can
//! serve as the oracle for the analytic gradients produced by backprop.

/// Central-difference gradient of `f` at `x0` with step `h`.
pub fn central_difference<F>(x0: &[f64], mut f: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case relative disagreement between two gradient vectors.
///
/// Relative error uses `max(|a|, |b|, 1.0)` in the denominator so entries that
/// are both near zero do not manufacture large ratios out of rounding noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: evaluates `objective` for the numeric gradient, calls
/// `analytic` once, and returns the worst relative error between the two.
pub fn check_gradient<F, G>(x0: &[f64], objective: F, analytic: G, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    let num = central_difference(x0, objective, h);
    let ana = analytic(x0);
    max_relative_error(&ana, &num)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i
        let x0 = [0.5, -1.5, 2.0];
        let num = central_difference(&x0, |x| x.iter().map(|v| v * v).sum(), 1e-5);
        let ana: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        assert!(max_relative_error(&ana, &num) < 1e-9);
    }
}
