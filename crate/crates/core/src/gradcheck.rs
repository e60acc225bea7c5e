//! Central finite differences, the reference every analytic gradient is
//! checked against.

use crate::scalar::Real;
use crate::tensor::Tensor;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Tensor<T>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(step);
        let plus = f(&probe).as_f64();
        probe.data_mut()[i] = orig - T::of(step);
        let minus = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = T::of((plus - minus) / (2.0 * step));
    }
    out
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
///
/// The floor keeps near-zero gradients from turning rounding noise into a
/// large relative error.
pub fn relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|v| v.as_f64().abs())
        .fold(floor, f64::max);
    diff / scale
}
