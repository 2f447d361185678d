//! Central-difference gradient checking.
//!
//! Test utility: re-evaluates a scalar loss with each input element nudged
//! by ±h and compares the quotient against an analytic gradient. Kept
//! independent of the tape internals on purpose — it only calls the closure.

use ndarray::ArrayD;

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn finite_diff<F>(f: &mut F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-case relative error between analytic and numeric gradients.
/// Element pairs below `atol` in absolute difference count as exact.
pub fn max_relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, atol: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let diff = (a - n).abs();
        if diff < atol {
            continue;
        }
        let rel = diff / (a.abs() + n.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Assert an analytic gradient matches central differences.
pub fn assert_gradients_close<F>(
    f: &mut F,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    h: f64,
    rel_tol: f64,
    what: &str,
) where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let numeric = finite_diff(f, x, h);
    let err = max_relative_error(analytic, &numeric, 1e-8);
    assert!(
        err < rel_tol,
        "{what}: gradient relative error {err:.3e} >= {rel_tol:.1e}"
    );
}
