//! Central finite differences, used as the oracle for every gradient test.

use super::Tensor;

/// Central-difference gradient of `f` at `params`, one tensor per parameter.
///
/// `f` only ever sees forward values, so this path shares nothing with
/// [`Tape::backward`](super::Tape::backward).
pub fn finite_diff<F>(mut f: F, params: &[Tensor], eps: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "finite_diff needs eps > 0");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[p].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            *g = (up - down) / (2.0 * eps);
        }
        out.push(Tensor::from_parts(params[p].shape().to_vec(), grad));
    }
    out
}

/// `|a - b| / max(|a|, |b|)` with the denominator clamped at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
