//! Float helpers routed through `libm` so the crate computes identically on
//! `std` and `no_std` builds.

use alloc::vec::Vec;

pub(crate) const LN_2: f64 = core::f64::consts::LN_2;

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// `p * ln(p / q)` with the conventions `0 * ln(0 / q) = 0` for any `q`.
/// The caller must rule out `p > 0, q = 0` beforehand.
#[inline]
pub(crate) fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * ln(p / q)
    }
}

/// Largest absolute entry difference between two equally sized slices.
pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut m = 0.0;
    for (x, y) in a.iter().zip(b) {
        m = f64::max(m, abs(x - y));
    }
    m
}

pub(crate) fn sup_diff_nested(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut m = 0.0;
    for (x, y) in a.iter().zip(b) {
        m = f64::max(m, sup_diff(x, y));
    }
    m
}

/// Rescale a nonnegative vector to sum to one. Returns `false` when the mass
/// is zero or non-finite, leaving the input untouched.
pub(crate) fn normalize_l1(v: &mut [f64]) -> bool {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_term_zero_mass_is_zero() {
        assert_eq!(kl_term(0.0, 0.0), 0.0);
        assert_eq!(kl_term(0.0, 0.3), 0.0);
        assert!(abs(kl_term(0.5, 0.25) - 0.5 * LN_2) < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero_mass() {
        let mut v = [0.0, 0.0];
        assert!(!normalize_l1(&mut v));
        let mut w = [1.0, 3.0];
        assert!(normalize_l1(&mut w));
        assert_eq!(w, [0.25, 0.75]);
    }
}
