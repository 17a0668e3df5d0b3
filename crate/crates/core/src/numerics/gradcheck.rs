//! Central finite-difference checks of analytic parameter gradients.

use rand::seq::index::sample;

use crate::numerics::{DenseNet, Gradients};
use crate::rng::Rng;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One-sided slopes disagreeing by more than this (relative) mark a stencil
/// that straddles a kink of the loss.
pub const KINK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates left out because every step tried straddled a kink.
    pub skipped: usize,
}

impl CheckResult {
    pub fn merge(self, other: CheckResult) -> CheckResult {
        CheckResult {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Up to `n` distinct parameter indices of `net`, or all of them when it has fewer.
pub fn sample_coords(net: &DenseNet, n: usize, r: &mut Rng) -> Vec<usize> {
    let total = net.num_params();
    if total <= n {
        return (0..total).collect();
    }
    let mut v = sample(r, total, n).into_vec();
    v.sort_unstable();
    v
}

/// Compares `analytic` against `(L(θ + h e_k) − L(θ − h e_k)) / 2h` at each index.
///
/// ReLU units make the loss piecewise smooth. When the left and right slopes
/// of a stencil disagree, the step is cut tenfold once, and the coordinate is
/// skipped if that stencil is not smooth either. Smaller steps would trade the
/// kink for roundoff.
pub fn check_params(
    net: &DenseNet,
    analytic: &Gradients,
    coords: &[usize],
    h: f64,
    mut loss: impl FnMut(&DenseNet) -> f64,
) -> CheckResult {
    let flat = analytic.flat();
    let mut probe = net.clone();
    let base = loss(net);
    let mut out = CheckResult { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for &k in coords {
        let orig = *probe.param_mut(k);
        let mut step = h;
        let mut numeric = None;
        for _ in 0..2 {
            *probe.param_mut(k) = orig + step;
            let up = loss(&probe);
            *probe.param_mut(k) = orig - step;
            let down = loss(&probe);
            let (left, right) = ((base - down) / step, (up - base) / step);
            if relative_error(left, right) <= KINK_TOL {
                numeric = Some((up - down) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        *probe.param_mut(k) = orig;
        match numeric {
            Some(n) => {
                out.max_rel_err = out.max_rel_err.max(relative_error(flat[k], n));
                out.checked += 1;
            }
            None => out.skipped += 1,
        }
    }
    out
}
