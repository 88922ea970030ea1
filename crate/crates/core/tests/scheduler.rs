//! Sampler oracles and forward-process statistics.

use ldm_core::autograd::Tensor;
use ldm_core::scheduler::*;
use ldm_core::seed;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

/// Exact noise prediction when all data sits at `target`.
fn point_mass(target: Tensor, schedule: NoiseSchedule) -> impl FnMut(&Tensor, usize) -> ldm_core::Result<Tensor> {
    move |x, t| {
        let s = schedule.sigma(t);
        let k = (1.0 + s * s).sqrt();
        Ok(x.zip_map(&target, |xv, z| (xv * k - z) / s))
    }
}

/// Exact noise prediction for 1-D Gaussian data N(mu, s^2) (per element).
fn gaussian(mu: f64, sd: f64, schedule: NoiseSchedule) -> impl FnMut(&Tensor, usize) -> ldm_core::Result<Tensor> {
    move |x, t| {
        let s = schedule.sigma(t);
        let k = (1.0 + s * s).sqrt();
        Ok(x.map(|xv| {
            let z = xv * k;
            let x0 = mu + sd * sd / (sd * sd + s * s) * (z - mu);
            (z - x0) / s
        }))
    }
}

#[test]
fn point_mass_is_recovered() {
    let sched = NoiseSchedule::default();
    let target = Tensor::new(vec![2, 3, 3], (0..18).map(|i| (i as f64 * 0.7).sin() * 2.0).collect());
    let start = initial_latent(&[2, 3, 3], &sched, 5);
    for n in [1, 5, 10, 25, 50] {
        let steps = TimestepSelection::leading(&sched, n).unwrap();
        let out = euler_sample(point_mass(target.clone(), sched.clone()), &start, &steps, &sched).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-3, "n={n}: {}", out.max_abs_diff(&target));
    }
}

#[test]
fn euler_error_shrinks_with_steps_on_gaussian_data() {
    let sched = NoiseSchedule::default();
    let (mu, sd) = (0.4, 0.6);
    let start = initial_latent(&[64], &sched, 9);
    let smax = sched.sigma_max();
    // probability-flow solution: (z - mu) scales with sqrt(sd^2 + sigma^2)
    let exact = start.map(|z| mu + (z - mu) * sd / (sd * sd + smax * smax).sqrt());
    let errs: Vec<f64> = [5, 10, 25, 50, 200]
        .iter()
        .map(|&n| {
            let steps = TimestepSelection::leading(&sched, n).unwrap();
            euler_sample(gaussian(mu, sd, sched.clone()), &start, &steps, &sched).unwrap().max_abs_diff(&exact)
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(errs[4] < 0.02, "{errs:?}");
}

#[test]
fn iterated_steps_match_closed_form_marginal() {
    let sched = NoiseSchedule::default();
    let n = 10_000;
    let z0 = 1.5;
    let checkpoints = [1, 10, 100, 500, 1000];
    let mut rng = seed::rng(42);
    let mut sums = vec![(0.0, 0.0); checkpoints.len()];
    for _ in 0..n {
        let mut z = z0;
        let mut k = 0;
        for t in 1..=sched.num_steps() {
            z = forward_step(z, t, StandardNormal.sample(&mut rng), &sched);
            if t == checkpoints[k] {
                sums[k].0 += z;
                sums[k].1 += z * z;
                k = (k + 1).min(checkpoints.len() - 1);
            }
        }
    }
    for (&t, &(s1, s2)) in checkpoints.iter().zip(&sums) {
        let ab = sched.alpha_bar(t);
        let (mean, var) = (ab.sqrt() * z0, 1.0 - ab);
        let m = s1 / n as f64;
        let v = (s2 - n as f64 * m * m) / (n - 1) as f64;
        let se_m = (var / n as f64).sqrt();
        let se_v = var * (2.0 / (n - 1) as f64).sqrt();
        assert!((m - mean).abs() < 3.0 * se_m, "t={t}: mean {m} vs {mean}");
        assert!((v - var).abs() < 3.0 * se_v, "t={t}: var {v} vs {var}");
    }
}

#[test]
fn default_schedule_endpoints() {
    let s = NoiseSchedule::default();
    assert_eq!(s.num_steps(), DEFAULT_T);
    assert!((s.beta(1) - DEFAULT_BETA_START).abs() < 1e-15);
    assert!((s.beta(DEFAULT_T) - DEFAULT_BETA_END).abs() < 1e-15);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.sigma(0), 0.0);
    assert!(s.sigmas.windows(2).all(|w| w[1] > w[0]));
    // scaled-linear interpolates sqrt(beta)
    let mid = (DEFAULT_BETA_START.sqrt() + DEFAULT_BETA_END.sqrt()) / 2.0;
    let lin = make_schedule(ScheduleKind::ScaledLinear, 3, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
    assert!((lin.beta(2) - mid * mid).abs() < 1e-15);
}

#[test]
fn leading_selection_examples() {
    let s = NoiseSchedule::default();
    let sel = TimestepSelection::leading(&s, 4).unwrap();
    assert_eq!(sel.indices, vec![1000, 750, 500, 250]);
    assert_eq!(*sel.sigma_ladder(&s).last().unwrap(), 0.0);
    assert!(TimestepSelection::leading(&s, 0).is_err());
    assert!(TimestepSelection::leading(&s, 1001).is_err());
}

#[test]
fn minsnr_weight_caps_low_noise_steps() {
    let s = NoiseSchedule::default();
    for t in [1, 10, 100, 500, 1000] {
        let w = minsnr_weight(t, DEFAULT_GAMMA, &s).unwrap();
        let r = snr(t, &s).unwrap();
        assert!(w > 0.0 && w <= 1.0);
        if r <= DEFAULT_GAMMA {
            assert_eq!(w, 1.0);
        } else {
            assert!((w - DEFAULT_GAMMA / r).abs() < 1e-15);
        }
    }
    assert!(minsnr_weight(5, 0.0, &s).is_err());
}

proptest! {
    #[test]
    fn forward_noise_is_affine_in_inputs(z in -3.0..3.0f64, e in -3.0..3.0f64, t in 1usize..=1000) {
        let s = NoiseSchedule::default();
        let out = forward_noise_tensor(&Tensor::new(vec![1], vec![z]), t, &Tensor::new(vec![1], vec![e]), &s).unwrap();
        let ab = s.alpha_bar(t);
        prop_assert!((out.data()[0] - (ab.sqrt() * z + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
    }

    #[test]
    fn selection_is_strictly_descending(n in 1usize..=1000) {
        let s = NoiseSchedule::default();
        let sel = TimestepSelection::leading(&s, n).unwrap();
        prop_assert_eq!(sel.indices.len(), n);
        prop_assert_eq!(sel.indices[0], 1000);
        prop_assert!(sel.indices.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*sel.indices.last().unwrap() >= 1);
    }

    #[test]
    fn minsnr_weight_in_unit_interval(snr in 1e-6..1e6f64, gamma in 0.1..20.0f64) {
        let w = minsnr_from_snr(snr, gamma);
        prop_assert!(w > 0.0 && w <= 1.0);
    }
}
