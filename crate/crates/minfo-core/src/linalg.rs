//! Dense Gaussian elimination with partial pivoting, sized for the small
//! systems this crate solves (value functions and stationary distributions,
//! at most a few hundred unknowns).

use crate::math::abs;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug)]
pub(crate) struct Singular {
    /// Elimination column at which no usable pivot remained.
    #[allow(dead_code)]
    pub(crate) row: usize,
}

/// Solve `A x = b` in place; `a` is row-major `n * n`, `b` has length `n`.
/// On success `b` holds the solution. Fails when the best available pivot
/// falls below `pivot_tol` times the largest initial entry of its column.
pub(crate) fn solve_dense(
    a: &mut [f64],
    b: &mut [f64],
    n: usize,
    pivot_tol: f64,
) -> Result<(), Singular> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut best = col;
        let mut best_val = abs(a[perm[col] * n + col]);
        for (i, &p) in perm.iter().enumerate().skip(col + 1) {
            let v = abs(a[p * n + col]);
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        if !(best_val > pivot_tol) {
            return Err(Singular { row: col });
        }
        perm.swap(col, best);
        let prow = perm[col];
        let pivot = a[prow * n + col];
        for &r in perm.iter().skip(col + 1) {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for k in (col + 1)..n {
                a[r * n + k] -= factor * a[prow * n + k];
            }
            b[r] -= factor * b[prow];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let prow = perm[col];
        let mut acc = b[prow];
        for k in (col + 1)..n {
            acc -= a[prow * n + k] * x[k];
        }
        x[col] = acc / a[prow * n + col];
    }
    b.copy_from_slice(&x);
    Ok(())
}

/// Unique stationary row vector of a row-stochastic kernel, by replacing one
/// equation of `x (K - I) = 0` with the normalisation `sum x = 1`.
/// Fails when the chain has more than one recurrent class.
pub(crate) fn stationary_direct(kernel: &[Vec<f64>]) -> Result<Vec<f64>, Singular> {
    let n = kernel.len();
    // Row i of the system is equation sum_s x_s (K[s][i] - delta_si) = 0,
    // transposed into A x = b with the last equation replaced by sum x = 1.
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        for s in 0..n {
            a[i * n + s] = kernel[s][i] - if s == i { 1.0 } else { 0.0 };
        }
    }
    for s in 0..n {
        a[(n - 1) * n + s] = 1.0;
    }
    b[n - 1] = 1.0;
    solve_dense(&mut a, &mut b, n, 1e-12)?;
    for x in b.iter_mut() {
        // Transient states may come out as tiny negatives.
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    crate::math::normalize_l1(&mut b);
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // A = [[2, 1], [1, 3]], b = [3, 5] -> x = [0.8, 1.4]
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![3.0, 5.0];
        solve_dense(&mut a, &mut b, 2, 1e-14).unwrap();
        assert!(abs(b[0] - 0.8) < 1e-12);
        assert!(abs(b[1] - 1.4) < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense(&mut a, &mut b, 2, 1e-12).is_err());
    }

    #[test]
    fn stationary_of_periodic_chain() {
        // Deterministic two-cycle: power iteration would oscillate, the
        // direct solve still returns the unique stationary vector.
        let k = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let pi = stationary_direct(&k).unwrap();
        assert!(abs(pi[0] - 0.5) < 1e-14);
        assert!(abs(pi[1] - 0.5) < 1e-14);
    }

    #[test]
    fn stationary_with_transient_states() {
        // State 0 is transient, all mass drains to the 1<->2 cycle.
        let k = vec![
            vec![0.0, 0.5, 0.5],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ];
        let pi = stationary_direct(&k).unwrap();
        assert!(abs(pi[0]) < 1e-14);
        assert!(abs(pi[1] - 0.5) < 1e-14);
        assert!(abs(pi[2] - 0.5) < 1e-14);
    }

    #[test]
    fn stationary_rejects_two_recurrent_classes() {
        let k = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(stationary_direct(&k).is_err());
    }
}
