//! Finite-difference oracles for validating analytic gradients.
//!
//! These helpers only ever call the loss function; they know nothing about
//! how gradients are computed elsewhere in the crate.

use crate::numerics::Real;

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences at ε = 1e-5 carry roughly 1e-10 of rounding noise, so
/// relative error is meaningless for gradients much smaller than this floor.
pub const RELATIVE_ERROR_FLOOR: Real = 1e-4;

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[Real]) -> Real, x: &[Real], eps: Real) -> Vec<Real> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic.iter().zip(numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, Real::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(1e-12, 0.0), 1e-12 / RELATIVE_ERROR_FLOOR);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
