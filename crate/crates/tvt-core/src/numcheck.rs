//! Finite-difference gradient checking helpers (test support).
//!
//! Central differences in f64: truncation error is O(eps^2), so with the
//! default step the checks comfortably resolve the 1e-4 relative tolerance
//! the gradient tests demand.

use alloc::vec::Vec;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, restricted to `indices`.
pub fn fd_grad_subset(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut xbuf = x.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = xbuf[i];
        xbuf[i] = orig + eps;
        let fp = f(&xbuf);
        xbuf[i] = orig - eps;
        let fm = f(&xbuf);
        xbuf[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Largest relative disagreement between analytic and finite-difference
/// gradients. Denominator is floored so near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let mut worst = 0.0f64;
    for (&a, &f) in analytic.iter().zip(fd) {
        let denom = crate::fmath::abs(a).max(crate::fmath::abs(f)).max(1e-6);
        let err = crate::fmath::abs(a - f) / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Picks `count` well-spread coordinate indices out of `len` for spot checks.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    if count == 0 {
        return Vec::new();
    }
    (0..count).map(|i| i * len / count).collect()
}
