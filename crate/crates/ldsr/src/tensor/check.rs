//! Finite-difference utilities used by the gradient-check tests. These are
//! deliberately independent of the autodiff path they verify: they only
//! re-evaluate a scalar function at perturbed inputs.

/// Central difference d f / d x[i] with step h.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let fp = f(x);
    x[i] = orig - h;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * h)
}

/// Full numeric gradient by central differences.
pub fn numeric_grad(x: &mut [f64], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len()).map(|i| central_diff(x, i, h, f)).collect()
}

/// Relative error with a small floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
