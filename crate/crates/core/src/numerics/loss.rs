//! Scalar losses with gradients with respect to their first argument(s).

use crate::error::{Error, Result};

/// Probability floor applied before taking a log in cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

/// Mean squared error over components and its gradient w.r.t. `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "mse on lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// `−ln max(p[class], floor)` and its gradient w.r.t. the probability vector.
pub fn cross_entropy(probs: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
    if class >= probs.len() {
        return Err(Error::contract(format!(
            "class index {class} outside a {}-way distribution",
            probs.len()
        )));
    }
    let p = probs[class];
    let mut grad = vec![0.0; probs.len()];
    if p > CE_FLOOR {
        grad[class] = -1.0 / p;
        Ok((-p.ln(), grad))
    } else {
        Ok((-CE_FLOOR.ln(), grad))
    }
}

/// KL(N(μ, diag σ²) ‖ N(0, I)) with gradients w.r.t. μ and log σ².
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if mu.len() != logvar.len() {
        return Err(Error::contract("kl: μ and log σ² lengths differ"));
    }
    let mut kl = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let var = lv.exp();
        kl += m * m + var - 1.0 - lv;
        dmu.push(m);
        dlv.push(0.5 * (var - 1.0));
    }
    Ok((0.5 * kl, dmu, dlv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use proptest::prelude::*;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag_gaussian(&[0.0; 4], &[0.0; 4]).unwrap().0, 0.0);
        assert_eq!(kl_diag_gaussian(&[1.0], &[0.0]).unwrap().0, 0.5);
    }

    #[test]
    fn mse_scalar() {
        let (l, g) = mse(&[0.2], &[0.7]).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        assert!((g[0] + 1.0).abs() < 1e-15);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cross_entropy_floor() {
        let (l, g) = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(l.is_finite());
        assert_eq!(g, vec![0.0, 0.0]);
        let (l, g) = cross_entropy(&[0.25, 0.75], 1).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-15);
        assert!((g[1] + 1.0 / 0.75).abs() < 1e-15);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mu = [0.3, -1.2, 0.05];
        let lv = [-0.4, 0.7, 0.0];
        let (_, dmu, dlv) = kl_diag_gaussian(&mu, &lv).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut a = mu;
            let mut b = mu;
            a[i] += h;
            b[i] -= h;
            let fd = (kl_diag_gaussian(&a, &lv).unwrap().0 - kl_diag_gaussian(&b, &lv).unwrap().0)
                / (2.0 * h);
            assert!((fd - dmu[i]).abs() < 1e-8);
            let mut a = lv;
            let mut b = lv;
            a[i] += h;
            b[i] -= h;
            let fd = (kl_diag_gaussian(&mu, &a).unwrap().0 - kl_diag_gaussian(&mu, &b).unwrap().0)
                / (2.0 * h);
            assert!((fd - dlv[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 1..8),
                             lv in prop::collection::vec(-5.0f64..5.0, 8)) {
            let lv = &lv[..mu.len()];
            let (kl, _, _) = kl_diag_gaussian(&mu, lv).unwrap();
            prop_assert!(kl >= 0.0);
            let off_prior = mu.iter().any(|m| m.abs() > 1e-3) || lv.iter().any(|l| l.abs() > 1e-3);
            if off_prior {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            z in prop::collection::vec(-30.0f64..30.0, 2..12),
            rot in 0usize..12,
        ) {
            let p = softmax(&z);
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let k = rot % z.len();
            let mut zr = z.clone();
            zr.rotate_left(k);
            let mut pr = p.clone();
            pr.rotate_left(k);
            let q = softmax(&zr);
            for (a, b) in q.iter().zip(&pr) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
