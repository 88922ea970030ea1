//! Denoiser (and adapter) gradients against central finite differences.

use ldm_core::autograd::{Graph, ParamSet, Tensor};
use ldm_core::conditioning::{embed_labels, null_embedding};
use ldm_core::denoiser::{context_tensors, timestep_features, DenoiserConfig, DenoiserParams, Net};
use ldm_core::findings::{FindingLabel, LabelVector};
use ldm_core::lora::init_adapters;
use ldm_core::seed;
use rand::Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;

struct Problem {
    x: Tensor,
    ts: Vec<usize>,
    c1: Tensor,
    c2: Tensor,
    target: Tensor,
    weights: Vec<f64>,
}

fn problem() -> Problem {
    let mut rng = seed::rng(21);
    let a = embed_labels(&LabelVector::single(FindingLabel::EDEMA));
    let n = null_embedding();
    let (c1, c2) = context_tensors(&[&a, &n]).unwrap();
    Problem {
        x: Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng),
        ts: vec![120, 870],
        c1,
        c2,
        target: Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng),
        weights: vec![1.0, 0.4],
    }
}

/// Loss value and the gradients of the base (or adapter) parameters.
fn evaluate(base: &ParamSet, lora: Option<(&ParamSet, f64)>, grad_base: bool, pr: &Problem) -> (f64, Vec<(String, Tensor)>) {
    let mut g = Graph::new();
    let b = base.bind(&mut g, grad_base);
    let lb = lora.map(|(p, s)| (p.bind(&mut g, !grad_base), s));
    let net = Net { base: &b, lora: lb.as_ref().map(|(l, s)| (l, *s)) };
    let x = g.input(pr.x.clone());
    let t = g.input(timestep_features(&pr.ts));
    let c1 = g.input(pr.c1.clone());
    let c2 = g.input(pr.c2.clone());
    let out = net.forward(&mut g, x, t, c1, c2);
    let target = g.input(pr.target.clone());
    let loss = g.weighted_mse(out, target, &pr.weights);
    let value = g.value(loss).item();
    let mut grads = g.backward(loss);
    let map = if grad_base { b.grads(&g, &mut grads) } else { lb.unwrap().0.grads(&g, &mut grads) };
    (value, map.into_iter().collect())
}

fn check_entries(
    params: &ParamSet,
    names: &[&str],
    per_tensor: usize,
    analytic: &[(String, Tensor)],
    loss_at: impl Fn(&ParamSet) -> f64,
) -> usize {
    let mut rng = seed::rng(99);
    let mut checked = 0;
    for name in names {
        let grad = &analytic.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no gradient for {name}")).1;
        for _ in 0..per_tensor {
            let j = rng.random_range(0..grad.len());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < REL_TOL || (a - numeric).abs() < 1e-9, "{name}[{j}]: analytic {a:e} numeric {numeric:e}");
            checked += 1;
        }
    }
    checked
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let p = DenoiserParams::init(DenoiserConfig::default(), 17).unwrap();
    let pr = problem();
    let (_, analytic) = evaluate(&p.params, None, true, &pr);
    let names = [
        "conv_in.w",
        "down.conv.w",
        "up.merge.w",
        "conv_out.b",
        "time.l1.w",
        "ctx.enc1.w",
        "ctx.enc2.w",
        "mid.attn1.q.w",
        "mid.attn1.k.w",
        "mid.attn1.v.w",
        "mid.attn2.k.w",
        "mid.attn2.o.w",
        "mid.ff.w1.w",
        "mid.ff.w2.w",
    ];
    let n = check_entries(&p.params, &names, 2, &analytic, |ps| evaluate(ps, None, true, &pr).0);
    assert!(n >= 20);
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let p = DenoiserParams::init(DenoiserConfig::default(), 18).unwrap();
    let mut set = init_adapters(&p.attachment_registry(), 4, 4.0, 3).unwrap();
    let mut rng = seed::rng(5);
    for a in set.adapters.values_mut() {
        a.b = Tensor::randn(a.b.shape(), 0.2, &mut rng);
    }
    let lp = set.to_params();
    let pr = problem();
    let (_, analytic) = evaluate(&p.params, Some((&lp, set.scale())), false, &pr);
    let names = ["mid.attn1.q.lora_a", "mid.attn2.v.lora_b", "mid.ff.w1.lora_a", "mid.ff.w2.lora_b"];
    let n = check_entries(&lp, &names, 3, &analytic, |ls| evaluate(&p.params, Some((ls, set.scale())), false, &pr).0);
    assert!(n >= 12);
}
