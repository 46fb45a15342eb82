//! Multi-choice targets: tempered tokenizer probabilities refined by
//! inter-patch affinities of the in-training encoder.
//!
//! ```text
//! p[i,k] = softmax_k(z[i,k] / τ)
//! W[i,j] = softmax_j(cos(f_i, f_j))
//! ẑ      = ω·p + (1 − ω)·W·p
//! ```
//!
//! Everything here is computed from detached values: no gradient flows back
//! through `p`, `W` or `ẑ`.

use ndarray::Array2;

use crate::real::{entropy, softmax_rows, Real};
use crate::{Error, Result};

/// Tempered row softmax of tokenizer logits.
pub fn soft_probs<T: Real>(z: &Array2<T>, tau: f64) -> Result<Array2<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let inv = T::lit(1.0 / tau);
    Ok(softmax_rows(&z.mapv(|v| v * inv)))
}

/// Row-stochastic affinity from cosine similarities of patch features.
///
/// Zero-norm rows have zero similarity to every patch (themselves included),
/// which makes their affinity row uniform.
pub fn patch_affinity<T: Real>(features: &Array2<T>) -> Array2<T> {
    let mut unit = features.clone();
    for mut row in unit.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(T::zero());
        }
    }
    let sims = unit.dot(&unit.t());
    softmax_rows(&sims)
}

/// `ω·p + (1 − ω)·W·p`.
pub fn blend_targets<T: Real>(p: &Array2<T>, w: &Array2<T>, omega: f64) -> Result<Array2<T>> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!(
            "equilibrium coefficient must lie in [0, 1], got {omega}"
        )));
    }
    let n = p.nrows();
    if w.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "affinity {:?} does not match {n} patches",
            w.dim()
        )));
    }
    if omega == 1.0 {
        return Ok(p.clone());
    }
    let propagated = w.dot(p);
    if omega == 0.0 {
        return Ok(propagated);
    }
    let om = T::lit(omega);
    Ok(p * om + &(propagated * (T::one() - om)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution<T> {
    pub p: Array2<T>,
    pub w: Array2<T>,
    pub z_hat: Array2<T>,
    pub tau: f64,
    pub omega: f64,
}

impl<T: Real> TargetDistribution<T> {
    /// Mean Shannon entropy (nats) of the `ẑ` rows listed in `rows`.
    pub fn mean_entropy(&self, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter()
            .map(|&i| entropy(self.z_hat.row(i)).as_f64())
            .sum::<f64>()
            / rows.len() as f64
    }
}

/// Composes [`soft_probs`], [`patch_affinity`] and [`blend_targets`] for one
/// image. `features` are treated as constants.
pub fn build_targets<T: Real>(
    z: &Array2<T>,
    features: &Array2<T>,
    tau: f64,
    omega: f64,
) -> Result<TargetDistribution<T>> {
    if z.nrows() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} feature rows",
            z.nrows(),
            features.nrows()
        )));
    }
    let p = soft_probs(z, tau)?;
    let w = patch_affinity(features);
    let z_hat = blend_targets(&p, &w, omega)?;
    Ok(TargetDistribution {
        p,
        w,
        z_hat,
        tau,
        omega,
    })
}

/// One-hot rows at the given ids (the single-choice target).
pub fn one_hot<T: Real>(ids: &[usize], vocab: usize) -> Array2<T> {
    let mut out = Array2::zeros((ids.len(), vocab));
    for (i, &k) in ids.iter().enumerate() {
        out[[i, k]] = T::one();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn assert_stochastic(m: &Array2<f64>) {
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6, "{row}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn constant_row_is_uniform() {
        let p = soft_probs(&array![[3.0f64, 3.0, 3.0]], 0.7).unwrap();
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sharp_temperature_is_one_hot() {
        let p = soft_probs(&array![[1.0f64, 0.0]], 1e-6).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-9);
        assert!(p[[0, 1]].abs() < 1e-9);
    }

    // Golden row: exp(z/4) / Σ exp(z/4) for z = [2.0, 0.5, -1.0], evaluated
    // with a plain double-precision softmax.
    #[test]
    fn default_temperature_golden_row() {
        let p = soft_probs(&array![[2.0f64, 0.5, -1.0]], 4.0).unwrap();
        let golden = [0.46303674196579453, 0.3182401884393924, 0.2187230695948131];
        for (a, b) in p.iter().zip(golden) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(soft_probs(&array![[1.0f64]], tau).is_err());
        }
    }

    #[test]
    fn identical_features_give_uniform_affinity() {
        let f = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 + 0.5);
        let w = patch_affinity(&f);
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(patch_affinity(&array![[0.3f64, -0.1]]), array![[1.0f64]]);
    }

    #[test]
    fn zero_feature_row_is_uniform() {
        let f = array![[0.0f64, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let w = patch_affinity(&f);
        for &v in w.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_stochastic(&w);
    }

    #[test]
    fn affinity_matches_oracle() {
        let f = array![[0.3f64, -1.2], [0.8, 0.4], [-0.5, 0.9]];
        let w = patch_affinity(&f);
        for i in 0..3 {
            let ni = (f[[i, 0]].powi(2) + f[[i, 1]].powi(2)).sqrt();
            let sims: Vec<f64> = (0..3)
                .map(|j| {
                    let nj = (f[[j, 0]].powi(2) + f[[j, 1]].powi(2)).sqrt();
                    (f[[i, 0]] * f[[j, 0]] + f[[i, 1]] * f[[j, 1]]) / (ni * nj)
                })
                .collect();
            let z: f64 = sims.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                assert!((w[[i, j]] - sims[j].exp() / z).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blend_endpoints_and_oracle() {
        let p = array![[0.2f64, 0.5, 0.3], [0.6, 0.1, 0.3]];
        let w = array![[0.7f64, 0.3], [0.4, 0.6]];
        assert_eq!(blend_targets(&p, &w, 1.0).unwrap(), p);
        assert_eq!(blend_targets(&p, &w, 0.0).unwrap(), w.dot(&p));
        let z = blend_targets(&p, &w, 0.8).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let wp = w[[i, 0]] * p[[0, k]] + w[[i, 1]] * p[[1, k]];
                let expect = 0.8 * p[[i, k]] + 0.2 * wp;
                assert!((z[[i, k]] - expect).abs() < 1e-15);
            }
        }
        assert!(blend_targets(&p, &w, 1.5).is_err());
        assert!(blend_targets(&p, &w, -0.1).is_err());
    }

    #[test]
    fn omega_one_ignores_features() {
        let z = array![[0.1f64, -0.4, 0.2], [1.0, 0.0, -1.0]];
        let a = build_targets(&z, &array![[1.0f64, 0.0], [0.0, 1.0]], 4.0, 1.0).unwrap();
        let b = build_targets(&z, &array![[-3.0f64, 2.0], [0.5, 0.5]], 4.0, 1.0).unwrap();
        assert_eq!(a.z_hat, b.z_hat);
        assert_eq!(a.z_hat, a.p);
    }

    #[test]
    fn duplicate_patches_get_identical_targets() {
        let z = array![[0.3f64, -0.2, 0.9], [-1.0, 0.4, 0.0], [0.3, -0.2, 0.9]];
        let f = array![[0.5f64, 1.0, -0.3], [0.2, 0.1, 0.9], [0.5, 1.0, -0.3]];
        let t = build_targets(&z, &f, 4.0, 0.8).unwrap();
        assert_eq!(t.z_hat.row(0), t.z_hat.row(2));
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let z = array![[2.0f64, -1.0, 0.3, 0.0], [0.5, 0.4, -2.0, 1.0]];
        let mut last = -1.0;
        for tau in [0.1, 1.0, 4.0, 10.0] {
            let p = soft_probs(&z, tau).unwrap();
            let h: f64 = p.rows().into_iter().map(entropy).sum::<f64>() / 2.0;
            assert!(h > last);
            last = h;
        }
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    fn instance() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, f64, f64)> {
        (1usize..=8, 2usize..=12, 1usize..=6)
            .prop_flat_map(|(n, v, d)| (matrix(n, v), matrix(n, d), 0.05f64..10.0, 0.0f64..=1.0))
    }

    proptest! {
        #[test]
        fn rows_are_stochastic((z, f, tau, omega) in instance()) {
            let t = build_targets(&z, &f, tau, omega).unwrap();
            assert_stochastic(&t.p);
            assert_stochastic(&t.w);
            assert_stochastic(&t.z_hat);
        }

        #[test]
        fn shift_invariance((z, _f, tau, _o) in instance(), shift in -50.0f64..50.0) {
            let base = soft_probs(&z, tau).unwrap();
            let shifted = soft_probs(&(&z + shift), tau).unwrap();
            for (a, b) in base.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn blend_is_affine_in_omega((z, f, tau, _o) in instance()) {
            let t = build_targets(&z, &f, tau, 0.5).unwrap();
            let lo = blend_targets(&t.p, &t.w, 0.0).unwrap();
            let hi = blend_targets(&t.p, &t.w, 1.0).unwrap();
            for ((m, a), b) in t.z_hat.iter().zip(lo.iter()).zip(hi.iter()) {
                prop_assert!((m - 0.5 * (a + b)).abs() < 1e-12);
            }
        }
    }
}
