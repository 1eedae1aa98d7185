//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of the largest gradient component below which errors are
/// measured against that fraction instead of the component itself.
pub const GRAD_FLOOR: f64 = 1e-2;

/// Central differences of a scalar function, one coordinate at a time.
///
/// The step actually taken is the difference of the two rounded `f32`
/// coordinates, not `2 * eps`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor::new(x.shape(), grad)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f32, numeric: f32, floor: f64) -> f64 {
    let (a, n) = (analytic as f64, numeric as f64);
    let denom = a.abs().max(n.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Worst [`relative_error`] and its flat index, with the floor set to
/// `GRAD_FLOOR` times the largest analytic component.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> (f64, usize) {
    assert_eq!(analytic.shape(), numeric.shape());
    let floor = GRAD_FLOOR
        * analytic
            .data()
            .iter()
            .fold(0.0f64, |m, &a| m.max(a.abs() as f64));
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .enumerate()
        .fold(
            (0.0, 0),
            |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) },
        )
}
