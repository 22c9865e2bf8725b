//! Finite-difference helpers shared by the unit tests.

use super::Grid;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a magnitude floor so that gradients that are zero up
/// to round-off compare by absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` with respect to every entry of `at`.
pub fn numeric_grad(at: &Grid, mut f: impl FnMut(&Grid) -> f64) -> Grid {
    let mut probe = at.clone();
    let mut out = Grid::zeros(at.shape());
    for i in 0..at.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

pub fn assert_grad_close(analytic: &Grid, numeric: &Grid, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape");
    for (i, (a, n)) in analytic.as_slice().iter().zip(numeric.as_slice()).enumerate() {
        let e = rel_err(*a, *n);
        assert!(e < FD_TOL, "{what}[{i}]: analytic {a} vs numeric {n} (rel err {e:e})");
    }
}
