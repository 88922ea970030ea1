//! Adapter algebra: neutrality at init, merge round trips, lazy vs merged
//! evaluation and parameter counting.

use ldm_core::autograd::Tensor;
use ldm_core::conditioning::{embed_labels, null_embedding};
use ldm_core::denoiser::{predict_noise_batch, DenoiserConfig, DenoiserParams, ATTACHMENT_LAYERS};
use ldm_core::findings::{FindingLabel, LabelVector};
use ldm_core::lora::*;
use ldm_core::seed;
use proptest::prelude::*;

fn randomized(mut set: AdapterSet, seed: u64) -> AdapterSet {
    let mut rng = seed::rng(seed);
    for a in set.adapters.values_mut() {
        a.b = Tensor::randn(a.b.shape(), 0.3, &mut rng);
    }
    set
}

fn base() -> DenoiserParams {
    DenoiserParams::init(DenoiserConfig::default(), 3).unwrap()
}

#[test]
fn zero_init_is_exactly_neutral() {
    let p = base();
    let set = init_adapters(&p.attachment_registry(), DEFAULT_RANK, DEFAULT_ALPHA, 1).unwrap();
    let x = Tensor::randn(&[3, 4, 8, 8], 1.0, &mut seed::rng(2));
    let c = embed_labels(&LabelVector::single(FindingLabel::CARDIOMEGALY));
    let n = null_embedding();
    let conds = [&c, &n, &c];
    let plain = predict_noise_batch(&p, None, &x, &[10, 500, 999], &conds).unwrap();
    let adapted = predict_noise_batch(&p, Some(&set), &x, &[10, 500, 999], &conds).unwrap();
    assert_eq!(plain, adapted);
    assert_eq!(merge_into(&p, &set).unwrap(), p);
}

#[test]
fn merge_unmerge_round_trip() {
    let p = base();
    let set = randomized(init_adapters(&p.attachment_registry(), 4, 8.0, 5).unwrap(), 6);
    let merged = merge_into(&p, &set).unwrap();
    assert_ne!(merged, p);
    let back = unmerge_from(&merged, &set).unwrap();
    for (name, t) in p.params.iter() {
        assert!(back.params.require(name).unwrap().max_abs_diff(t) < 1e-9, "{name}");
    }
}

#[test]
fn lazy_matches_merged_on_random_probes() {
    let mut rng = seed::rng(7);
    for probe in 0..100 {
        let m = Tensor::randn(&[64, 64], 0.2, &mut rng);
        let a = LoraAdapter {
            target: "probe".into(),
            a: Tensor::randn(&[64, 4], 1.0, &mut rng),
            b: Tensor::randn(&[4, 64], 0.5, &mut rng),
            rank: 4,
            alpha: 4.0,
        };
        let x = Tensor::randn(&[64], 1.0, &mut rng);
        let lazy = adapted_forward(&m, &a, x.data()).unwrap();
        let w = merge(&m, &a).unwrap();
        for (r, l) in lazy.iter().enumerate() {
            let dense: f64 = (0..64).map(|c| w.data()[r * 64 + c] * x.data()[c]).sum();
            assert!((l - dense).abs() <= 1e-6 * dense.abs().max(1.0), "probe {probe} row {r}");
        }
    }
}

#[test]
fn lazy_network_matches_merged_network() {
    let p = base();
    let set = randomized(init_adapters(&p.attachment_registry(), 4, 4.0, 8).unwrap(), 9);
    let merged = merge_into(&p, &set).unwrap();
    let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut seed::rng(10));
    let c = embed_labels(&LabelVector::single(FindingLabel::EDEMA));
    let lazy = predict_noise_batch(&p, Some(&set), &x, &[300, 700], &[&c, &c]).unwrap();
    let dense = predict_noise_batch(&merged, None, &x, &[300, 700], &[&c, &c]).unwrap();
    for (a, b) in lazy.data().iter().zip(dense.data()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn trainable_count_is_two_d_r() {
    let p = base();
    let set = init_adapters(&p.attachment_registry(), 4, 4.0, 0).unwrap();
    assert_eq!(set.adapters.len(), ATTACHMENT_LAYERS.len());
    for a in set.adapters.values() {
        assert_eq!(a.num_trainable(), 2 * 64 * 4);
        assert_eq!(a.num_trainable(), 512);
    }
    let acc = parameter_accounting(&p, &set);
    assert_eq!(acc.trainable, 512 * ATTACHMENT_LAYERS.len());
    assert!(acc.trainable_fraction < 0.05);
}

#[test]
fn rank_limit_and_registry_mismatch_are_rejected() {
    let p = base();
    assert!(init_adapters(&p.attachment_registry(), 33, 4.0, 0).is_err());
    let reg = p.attachment_registry();
    let mut set = init_adapters(&reg, 2, 2.0, 0).unwrap();
    set.adapters.remove("mid.ff.w1");
    assert!(set.check_against(&reg).is_ok());
    let mut extra = set.adapters["mid.ff.w2"].clone();
    extra.target = "mid.extra".into();
    set.adapters.insert("mid.extra".into(), extra);
    assert!(set.check_against(&reg).is_err());
    assert!(merge_into(&p, &set).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact_for_f32_values() {
    let p = base();
    let mut set = randomized(init_adapters(&p.attachment_registry(), 4, 4.0, 11).unwrap(), 12);
    for a in set.adapters.values_mut() {
        a.a = a.a.map(|v| v as f32 as f64);
        a.b = a.b.map(|v| v as f32 as f64);
    }
    let bytes = set.to_checkpoint().to_bytes().unwrap();
    let back = AdapterSet::from_checkpoint(&ldm_core::checkpoint::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, set);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn merge_is_additive(d in 2usize..12, r in 1usize..4, s in 0u64..1000, alpha in 0.5..8.0f64) {
        prop_assume!(r <= d / 2);
        let mut rng = seed::rng(s);
        let m = Tensor::randn(&[d, d], 1.0, &mut rng);
        let a = LoraAdapter {
            target: "t".into(),
            a: Tensor::randn(&[d, r], 1.0, &mut rng),
            b: Tensor::randn(&[r, d], 1.0, &mut rng),
            rank: r,
            alpha,
        };
        let back = unmerge(&merge(&m, &a).unwrap(), &a).unwrap();
        prop_assert!(back.max_abs_diff(&m) < 1e-9);
        prop_assert_eq!(a.num_trainable(), 2 * d * r);
    }
}
