//! Tiled fusion identities.

use ldm_core::autograd::Tensor;
use ldm_core::conditioning::embed_labels;
use ldm_core::denoiser::{guided_predict_batch, DenoiserConfig, DenoiserParams};
use ldm_core::findings::{FindingLabel, LabelVector};
use ldm_core::multidiffusion::*;
use ldm_core::scheduler::{self, NoiseSchedule, TimestepSelection};
use ldm_core::seed;
use proptest::prelude::*;

fn eps_fn(p: &DenoiserParams) -> impl FnMut(&Tensor, usize) -> ldm_core::Result<Tensor> + '_ {
    let cond = embed_labels(&LabelVector::single(FindingLabel::PLEURAL_EFFUSION));
    move |x, t| {
        let conds = vec![&cond; x.shape()[0]];
        guided_predict_batch(p, None, x, t, &conds, 3.0)
    }
}

fn random_proposals(layout: &TileLayout, c: usize, s: u64) -> Vec<Tensor> {
    let mut rng = seed::rng(s);
    layout.rects.iter().map(|r| Tensor::randn(&[c, r.h, r.w], 1.0, &mut rng)).collect()
}

#[test]
fn single_tile_equals_plain_sampling_bitwise() {
    let p = DenoiserParams::init(DenoiserConfig::default(), 4).unwrap();
    let sched = NoiseSchedule::default();
    let steps = TimestepSelection::leading(&sched, 6).unwrap();
    let z = scheduler::initial_latent(&[4, 8, 8], &sched, 1);
    let layout = plan_tiles((8, 8), (8, 8), default_stride((8, 8))).unwrap();
    let tiled = multidiffusion_sample(eps_fn(&p), &z, &layout, &steps, &sched).unwrap();
    let plain = scheduler::euler_sample(eps_fn(&p), &z.clone().reshape(&[1, 4, 8, 8]), &steps, &sched).unwrap();
    assert_eq!(tiled.data(), plain.data());
}

#[test]
fn double_canvas_has_double_shape() {
    let p = DenoiserParams::init(DenoiserConfig::default(), 4).unwrap();
    let sched = NoiseSchedule::default();
    let steps = TimestepSelection::leading(&sched, 3).unwrap();
    let layout = plan_tiles((16, 16), (8, 8), (4, 4)).unwrap();
    assert_eq!(layout.rects.len(), 9);
    let z = scheduler::initial_latent(&[4, 16, 16], &sched, 2);
    let out = multidiffusion_sample(eps_fn(&p), &z, &layout, &steps, &sched).unwrap();
    assert_eq!(out.shape(), &[4, 16, 16]);
    assert!(out.all_finite());
}

#[test]
fn constant_proposals_fuse_exactly() {
    let layout = plan_tiles((20, 12), (8, 8), (3, 5)).unwrap();
    let v = 0.123456789;
    let props: Vec<Tensor> = layout.rects.iter().map(|r| Tensor::full(&[3, r.h, r.w], v)).collect();
    let order: Vec<usize> = (0..props.len()).collect();
    let out = fuse(&layout, &props, &order).unwrap();
    assert!(out.data().iter().all(|&x| x == v));
}

#[test]
fn half_overlapping_toy_averages_with_uniform_weights() {
    let mut layout = plan_tiles((1, 6), (1, 4), (1, 2)).unwrap();
    assert_eq!(layout.rects.len(), 2);
    layout.window = vec![1.0; 4];
    let p1 = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
    let p2 = Tensor::new(vec![1, 1, 4], vec![10.0, 20.0, 30.0, 40.0]);
    let out = fuse(&layout, &[p1, p2], &[0, 1]).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 6.5, 12.0, 30.0, 40.0]);
}

#[test]
fn layout_json_round_trips() {
    let layout = plan_tiles((16, 24), (8, 8), (4, 4)).unwrap();
    let back: TileLayout = serde_json::from_str(&layout.to_json().unwrap()).unwrap();
    assert_eq!(back, layout);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn layouts_cover_the_canvas(h in 1usize..40, w in 1usize..40, th in 1usize..12, tw in 1usize..12, sh in 1usize..12, sw in 1usize..12) {
        prop_assume!(th <= h && tw <= w && sh <= th && sw <= tw);
        let l = plan_tiles((h, w), (th, tw), (sh, sw)).unwrap();
        let mut weight = vec![0.0; h * w];
        for r in &l.rects {
            prop_assert!(r.y + r.h <= h && r.x + r.w <= w);
            for y in 0..r.h {
                for x in 0..r.w {
                    weight[(r.y + y) * w + r.x + x] += l.window[y * r.w + x];
                }
            }
        }
        prop_assert!(weight.iter().all(|&v| v > 0.0));
        prop_assert!(l.window.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn fusion_is_order_independent_and_convex(s in 0u64..10_000, rot in 0usize..9) {
        let layout = plan_tiles((16, 16), (8, 8), (4, 4)).unwrap();
        let props = random_proposals(&layout, 2, s);
        let order: Vec<usize> = (0..props.len()).collect();
        let mut perm = order.clone();
        perm.rotate_left(rot);
        perm.reverse();
        let a = fuse(&layout, &props, &order).unwrap();
        let b = fuse(&layout, &props, &perm).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        for ch in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    let vals: Vec<f64> = layout.rects.iter().zip(&props)
                        .filter(|(r, _)| y >= r.y && y < r.y + r.h && x >= r.x && x < r.x + r.w)
                        .map(|(r, p)| p.data()[(ch * r.h + y - r.y) * r.w + x - r.x])
                        .collect();
                    let v = a.data()[(ch * 16 + y) * 16 + x];
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo && v <= hi);
                }
            }
        }
    }
}
