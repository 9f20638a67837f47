//! Central finite differences.
//!
//! Only forward evaluations are used here, so these helpers are independent
//! of the backward rules they are used to check.

use super::tensor::Tensor;

/// Default step for central differences in `f64`.
pub const FD_STEP: f64 = 1e-6;

/// Numerical gradient of `f` at `x`: `(f(x + h e_i) - f(x - h e_i)) / 2h` per entry.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
///
/// A norm-wise ratio rather than a per-entry one: entries that are tiny in
/// both would otherwise be dominated by finite-difference round-off.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "relative_error shape mismatch");
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
