//! Central finite differences, used by tests as the independent oracle for
//! every analytic gradient on the tape.

use super::Arr;

/// Numeric gradient of scalar-valued `f` at `x` by central differences.
pub fn numeric_grad<F>(mut f: F, x: &Arr, eps: f64) -> Arr
where
    F: FnMut(&Arr) -> f64,
{
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative error with an absolute floor, `|a-b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`rel_err`] between two gradients.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}
