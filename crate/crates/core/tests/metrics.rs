//! Frechet distance and Vendi score against closed forms and invariants.

use ldm_core::metrics::*;
use ldm_core::seed;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianStats {
    GaussianStats { mean: DVector::from_vec(mean), cov, n: 100 }
}

fn random_cov(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d + 2, |_, _| StandardNormal.sample(rng));
    &a * a.transpose() / (d + 2) as f64
}

/// Gram matrix of random unit vectors: PSD with unit diagonal.
fn random_kernel(n: usize, dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut v = DMatrix::<f64>::from_fn(n, dim, |_, _| StandardNormal.sample(rng));
    for mut row in v.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    let mut k = &v * v.transpose();
    for i in 0..n {
        k[(i, i)] = 1.0;
    }
    (&k + k.transpose()) * 0.5
}

#[test]
fn frechet_of_identical_stats_is_zero() {
    let mut rng = seed::rng(1);
    for d in [1, 3, 16] {
        let s = stats((0..d).map(|i| i as f64).collect(), random_cov(d, &mut rng));
        assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-9);
    }
}

#[test]
fn frechet_closed_forms() {
    let one = |m: f64, v: f64| stats(vec![m], DMatrix::from_element(1, 1, v));
    assert!((frechet_distance(&one(0.0, 1.0), &one(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-8);
    // 1-D: (m1 - m2)^2 + (s1 - s2)^2
    let fd = frechet_distance(&one(0.5, 4.0), &one(-1.0, 0.25)).unwrap();
    assert!((fd - (2.25 + 1.5f64.powi(2))).abs() < 1e-8);
    // commuting (diagonal) covariances
    let a = stats(vec![1.0, 0.0, 2.0], DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 9.0])));
    let b = stats(vec![0.0, 0.0, 0.0], DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.25])));
    let want = 5.0 + 1.0 + 1.0 + 2.5f64.powi(2);
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-8);
}

#[test]
fn vendi_examples() {
    let same = SimilarityKernel::new(DMatrix::from_element(5, 5, 1.0)).unwrap();
    assert!((vendi_score(&same).unwrap() - 1.0).abs() < 1e-6);
    let orth = SimilarityKernel::new(DMatrix::identity(7, 7)).unwrap();
    assert!((vendi_score(&orth).unwrap() - 7.0).abs() < 1e-6);
    let half = SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
    assert!((vendi_score(&half).unwrap() - 1.7548).abs() < 1e-4);
    let exact = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
    assert!((vendi_score(&half).unwrap() - exact).abs() < 1e-6);
}

#[test]
fn vendi_in_range_on_random_kernels() {
    let mut rng = seed::rng(2);
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let dim = rng.random_range(1..=8);
        let k = SimilarityKernel::new(random_kernel(n, dim, &mut rng)).unwrap();
        let v = vendi_score(&k).unwrap();
        assert!(v >= 1.0 - 1e-9 && v <= n as f64 + 1e-9, "n={n}: {v}");
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0])).is_err());
    assert!(SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).is_err());
    let bad = SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0])).unwrap();
    assert!(vendi_score(&bad).is_err());
    assert!(fit_gaussian(&[vec![1.0]]).is_err());
    let a = stats(vec![0.0], DMatrix::from_element(1, 1, 1.0));
    let b = stats(vec![0.0, 0.0], DMatrix::identity(2, 2));
    assert!(frechet_distance(&a, &b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(s in 0u64..10_000, d in 1usize..6) {
        let mut rng = seed::rng(s);
        let a = stats((0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), random_cov(d, &mut rng));
        let b = stats((0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), random_cov(d, &mut rng));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-7 * ab.max(1.0));
    }

    #[test]
    fn fit_gaussian_ignores_sample_order(s in 0u64..10_000) {
        let mut rng = seed::rng(s);
        let mut feats: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let a = fit_gaussian(&feats).unwrap();
        feats.reverse();
        feats.swap(2, 11);
        let b = fit_gaussian(&feats).unwrap();
        prop_assert!((&a.mean - &b.mean).amax() < 1e-12);
        prop_assert!((&a.cov - &b.cov).amax() < 1e-12);
    }

    #[test]
    fn vendi_is_permutation_invariant(s in 0u64..10_000, n in 2usize..10) {
        let mut rng = seed::rng(s);
        let k = random_kernel(n, 4, &mut rng);
        let perm: Vec<usize> = (0..n).rev().collect();
        let kp = DMatrix::from_fn(n, n, |i, j| k[(perm[i], perm[j])]);
        let a = vendi_score(&SimilarityKernel::new(k).unwrap()).unwrap();
        let b = vendi_score(&SimilarityKernel::new(kp).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_invariant_to_feature_permutation(s in 0u64..10_000) {
        let mut rng = seed::rng(s);
        let d = 4;
        let a = stats((0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), random_cov(d, &mut rng));
        let b = stats((0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), random_cov(d, &mut rng));
        let p = [2, 0, 3, 1];
        let permute = |s: &GaussianStats| stats(
            p.iter().map(|&i| s.mean[i]).collect(),
            DMatrix::from_fn(d, d, |i, j| s.cov[(p[i], p[j])]),
        );
        let x = frechet_distance(&a, &b).unwrap();
        let y = frechet_distance(&permute(&a), &permute(&b)).unwrap();
        prop_assert!((x - y).abs() < 1e-7 * x.max(1.0));
    }
}
