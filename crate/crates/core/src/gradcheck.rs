//! Central finite-difference utilities for the gradient-check suites.
//!
//! These re-evaluate the target function numerically and never touch the
//! autodiff machinery, so they can serve as an independent oracle for it.

/// Central difference gradient of `f` at `x` for the given coordinates.
pub fn central_diff(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(coords.len());
    let mut xp = x.to_vec();
    for &c in coords {
        let orig = xp[c];
        xp[c] = orig + eps;
        let hi = f(&xp);
        xp[c] = orig - eps;
        let lo = f(&xp);
        xp[c] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Worst relative error between two gradient vectors.
/// `|a - b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compare an autodiff gradient against central differences on a coordinate
/// subset; returns a description of the worst offender on failure.
pub fn compare_grads(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    autodiff: &[f64],
    coords: &[usize],
    eps: f64,
    rtol: f64,
) -> Result<(), String> {
    let fd = central_diff(f, x, coords, eps);
    let ad: Vec<f64> = coords.iter().map(|&c| autodiff[c]).collect();
    let mut worst = (0.0f64, 0usize);
    for (i, (&a, &d)) in ad.iter().zip(&fd).enumerate() {
        let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-7);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    if worst.0 > rtol {
        let i = worst.1;
        Err(format!(
            "gradient mismatch at coord {}: autodiff {:.6e} vs finite-diff {:.6e} (rel err {:.3e} > rtol {:.1e})",
            coords[i], ad[i], fd[i], worst.0, rtol
        ))
    } else {
        Ok(())
    }
}
