//! Central finite-difference checks for every differentiable op.

use autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Checks d(loss)/d(input_i) for every input tensor built by `inputs`,
/// where `f` maps the bound inputs to a scalar.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vs);
        g.value(l).item()
    };

    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-8,
                "input {i} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contract with a fixed random tensor so every output element matters.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let w = rnd(g.shape(v), seed + 1000);
    let wv = g.input(w);
    let m = g.mul(v, wv);
    g.sum_all(m)
}

#[test]
fn elementwise_ops() {
    check(vec![rnd(&[2, 3], 1), rnd(&[2, 3], 2)], |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        let sc = g.scale(m, 0.7);
        let si = g.silu(sc);
        let sg = g.sigmoid(si);
        project(g, sg, 3)
    });
}

#[test]
fn linear_with_bias() {
    check(vec![rnd(&[2, 3, 4], 4), rnd(&[5, 4], 5), rnd(&[5], 6)], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        project(g, y, 7)
    });
}

#[test]
fn conv2d_strided_and_padded() {
    check(vec![rnd(&[2, 2, 5, 5], 8), rnd(&[3, 2, 3, 3], 9), rnd(&[3], 10)], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
        project(g, y, 11)
    });
    check(vec![rnd(&[1, 3, 4, 4], 12), rnd(&[2, 3, 1, 1], 13)], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0);
        project(g, y, 14)
    });
}

#[test]
fn spatial_ops() {
    check(vec![rnd(&[2, 2, 3, 3], 15), rnd(&[2, 1, 3, 3], 16), rnd(&[2, 3], 17)], |g, v| {
        let c = g.concat_channels(v[0], v[1]);
        let a = g.add_channel(c, v[2]);
        let u = g.upsample2(a);
        let t = g.to_tokens(u);
        let b = g.from_tokens(t, 6, 6);
        let p = g.global_avg_pool(b);
        let r = g.reshape(p, &[6]);
        project(g, r, 18)
    });
}

#[test]
fn attention_block_pieces() {
    check(
        vec![rnd(&[2, 4, 3], 19), rnd(&[2, 5, 3], 20), rnd(&[3], 21), rnd(&[3], 22), rnd(&[2, 3], 23), rnd(&[2, 3], 24)],
        |g, v| {
            let n = g.layer_norm(v[0], v[2], v[3]);
            let ctx = g.stack_tokens(&[v[4], v[5]]);
            let s = g.bmm(n, v[1], true);
            let s = g.scale(s, 0.5);
            let p = g.softmax_last(s);
            let o = g.bmm(p, v[1], false);
            let s2 = g.bmm(o, ctx, true);
            project(g, s2, 25)
        },
    );
}

#[test]
fn losses() {
    let target = rnd(&[3, 2, 2], 26);
    check(vec![rnd(&[3, 2, 2], 27), target], |g, v| g.weighted_mse(v[0], v[1], &[0.5, 1.0, 0.25]));
    let labels = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    check(vec![rnd(&[2, 3], 28)], move |g, v| g.bce_with_logits(v[0], &labels));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.input(rnd(&[2, 2], 29));
    let w = g.param(rnd(&[2, 2], 30));
    let y = g.linear(x, w, None);
    let l = g.sum_all(y);
    let grads = g.backward(l);
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}

#[test]
fn bilinear_upsampling() {
    check(vec![rnd(&[1, 2, 3, 4], 31)], |g, v| {
        let u = g.upsample_bilinear2(v[0]);
        project(g, u, 32)
    });
}
