use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddChannel { x: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cols: Vec<Vec<f64>> },
    Upsample2(usize),
    UpsampleBilinear2(usize),
    ConcatChannels(usize, usize),
    Silu(usize),
    Sigmoid(usize),
    ToTokens(usize),
    FromTokens(usize),
    StackTokens(Vec<usize>),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Bmm { a: usize, b: usize, trans_b: bool },
    SoftmaxLast(usize),
    Reshape(usize),
    WeightedMse { pred: usize, target: usize, weights: Vec<f64> },
    BceLogits { logits: usize, targets: Vec<f64> },
    GlobalAvgPool(usize),
    SumAll(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is retained after `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    /// `x[n, c, :, :] + b[n, c]` for `x` of shape (N, C, H, W).
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "add_channel expects NCHW input");
        assert_eq!(self.shape(b), &xs[..2], "add_channel bias must be (N, C)");
        let hw = xs[2] * xs[3];
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            for v in chunk {
                *v += bv[i];
            }
        }
        let rg = self.rg(x.0) || self.rg(b.0);
        self.push(out, Op::AddChannel { x: x.0, b: b.0 }, rg)
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear on scalar"), in_f, "linear: input features {xs:?} vs weight {ws:?}");
        let rows = xs.iter().product::<usize>() / in_f;
        let mut out = vec![0.0; rows * out_f];
        gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), rows, in_f),
            MatRef::row_major(self.value(w).data(), out_f, in_f).t(),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[out_f], "linear bias shape");
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += *bb;
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out_f;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        self.push(Tensor::new(shape, out), Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0), rows }, rg)
    }

    /// 2-D convolution, `x` (N, C, H, W), `w` (O, C, k, k), zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NCHW input, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be (O, C, k, k)");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let k = ws[2];
        assert!(stride >= 1 && xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k, "conv2d geometry");
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let keep_cols = self.rg(w.0);
        let (patch, opix) = (geom.patch(), geom.out_pixels());
        let in_size = geom.c * geom.h * geom.w;
        let mut out = vec![0.0; geom.n * geom.o * opix];
        let mut saved = Vec::new();
        let mut cols = vec![0.0; patch * opix];
        for n in 0..geom.n {
            let xn = &self.value(x).data()[n * in_size..(n + 1) * in_size];
            im2col(xn, &geom, &mut cols);
            gemm(
                1.0,
                MatRef::row_major(self.value(w).data(), geom.o, patch),
                MatRef::row_major(&cols, patch, opix),
                0.0,
                &mut out[n * geom.o * opix..(n + 1) * geom.o * opix],
            );
            if keep_cols {
                saved.push(cols.clone());
            }
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[geom.o], "conv2d bias shape");
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(opix).enumerate() {
                let bb = bv[i % geom.o];
                for v in chunk {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out);
        self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom, cols: saved }, rg)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2 expects NCHW");
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len() * 4];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(x.0), rg)
    }

    /// Bilinear 2x spatial upsampling (half-pixel centres, edge clamped).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 4, "upsample_bilinear2 expects NCHW");
        let out = crate::tensor::upsample_bilinear2(self.value(x));
        let rg = self.rg(x.0);
        self.push(out, Op::UpsampleBilinear2(x.0), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..], "concat_channels shapes {sa:?} {sb:?}");
        let hw = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb) * hw);
        for n in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::new(vec![sa[0], ca + cb, sa[2], sa[3]], out), Op::ConcatChannels(a.0, b.0), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x.0);
        self.push(value, Op::Silu(x.0), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x.0);
        self.push(value, Op::Sigmoid(x.0), rg)
    }

    /// (N, C, H, W) -> (N, H*W, C)
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "to_tokens expects NCHW");
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[b * hw * c + p * c + ch] = src[b * c * hw + ch * hw + p];
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(Tensor::new(vec![n, hw, c], out), Op::ToTokens(x.0), rg)
    }

    /// (N, H*W, C) -> (N, C, H, W)
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] == h * w, "from_tokens shape {s:?} vs {h}x{w}");
        let (n, hw, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[b * c * hw + ch * hw + p] = src[b * hw * c + p * c + ch];
                }
            }
        }
        let rg = self.rg(x.0);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::FromTokens(x.0), rg)
    }

    /// Stack (N, d) rows into an (N, k, d) token sequence.
    pub fn stack_tokens(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "stack_tokens of nothing");
        let s0 = self.shape(items[0]).to_vec();
        assert_eq!(s0.len(), 2, "stack_tokens expects (N, d) rows");
        for v in items {
            assert_eq!(self.shape(*v), &s0[..], "stack_tokens shape mismatch");
        }
        let (n, d, k) = (s0[0], s0[1], items.len());
        let mut out = vec![0.0; n * k * d];
        for (j, v) in items.iter().enumerate() {
            let src = self.value(*v).data();
            for b in 0..n {
                out[(b * k + j) * d..(b * k + j + 1) * d].copy_from_slice(&src[b * d..(b + 1) * d]);
            }
        }
        let rg = items.iter().any(|v| self.rg(v.0));
        self.push(Tensor::new(vec![n, k, d], out), Op::StackTokens(items.iter().map(|v| v.0).collect()), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta shape");
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        self.push(Tensor::new(s, out), Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }, rg)
    }

    /// Batched matmul: `a` (B, L, K) with `b` (B, K, S), or `b` (B, S, K) when
    /// `trans_b`; returns (B, L, S).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (bs, l, k) = (sa[0], sa[1], sa[2]);
        let s = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "bmm inner dimension {sa:?} {sb:?} trans_b={trans_b}");
        let mut out = vec![0.0; bs * l * s];
        for i in 0..bs {
            let am = MatRef::row_major(&self.value(a).data()[i * l * k..(i + 1) * l * k], l, k);
            let bd = &self.value(b).data()[i * k * s..(i + 1) * k * s];
            let bm = if trans_b { MatRef::row_major(bd, s, k).t() } else { MatRef::row_major(bd, k, s) };
            gemm(1.0, am, bm, 0.0, &mut out[i * l * s..(i + 1) * l * s]);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::new(vec![bs, l, s], out), Op::Bmm { a: a.0, b: b.0, trans_b }, rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("softmax on scalar");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::SoftmaxLast(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let rg = self.rg(x.0);
        self.push(value, Op::Reshape(x.0), rg)
    }

    /// `(1/N) * sum_n weights[n] * mean((pred[n] - target[n])^2)`.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: &[f64]) -> Var {
        self.same_shape("weighted_mse", pred, target);
        let n = self.shape(pred)[0];
        assert_eq!(weights.len(), n, "weighted_mse: one weight per sample");
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let per = p.len() / n;
        let mut total = 0.0;
        for i in 0..n {
            let se: f64 = p[i * per..(i + 1) * per]
                .iter()
                .zip(&t[i * per..(i + 1) * per])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += weights[i] * se / per as f64;
        }
        let rg = self.rg(pred.0) || self.rg(target.0);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::WeightedMse { pred: pred.0, target: target.0, weights: weights.to_vec() },
            rg,
        )
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Var {
        assert_eq!(self.shape(logits), targets.shape(), "bce_with_logits shape mismatch");
        let z = self.value(logits).data();
        let y = targets.data();
        let loss = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(logits.0);
        self.push(Tensor::scalar(loss), Op::BceLogits { logits: logits.0, targets: y.to_vec() }, rg)
    }

    /// (N, C, H, W) -> (N, C)
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool expects NCHW");
        let hw = s[2] * s[3];
        let out: Vec<f64> = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(x.0);
        self.push(Tensor::new(vec![s[0], s[1]], out), Op::GlobalAvgPool(x.0), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(v), Op::SumAll(x.0), rg)
    }

    /// Reverse pass from scalar `loss`. Gradients are kept for every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.scale(-1.0));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.zip_map(&self.nodes[*b].value, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(&self.nodes[*a].value, |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddChannel { x, b } => {
                if self.rg(*b) {
                    let s = g.shape();
                    let hw = s[2] * s[3];
                    let db: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    self.acc(grads, *b, Tensor::new(vec![s[0], s[1]], db));
                }
                self.acc(grads, *x, g);
            }
            Op::Linear { x, w, b, rows } => {
                let ws = self.nodes[*w].value.shape();
                let (out_f, in_f) = (ws[0], ws[1]);
                let gm = MatRef::row_major(g.data(), *rows, out_f);
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; out_f];
                        for row in g.data().chunks(out_f) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += *v;
                            }
                        }
                        self.acc(grads, *b, Tensor::new(vec![out_f], db));
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(1.0, gm.t(), MatRef::row_major(self.nodes[*x].value.data(), *rows, in_f), 0.0, &mut dw);
                    self.acc(grads, *w, Tensor::new(vec![out_f, in_f], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * in_f];
                    gemm(1.0, gm, MatRef::row_major(self.nodes[*w].value.data(), out_f, in_f), 0.0, &mut dx);
                    self.acc(grads, *x, Tensor::new(self.nodes[*x].value.shape().to_vec(), dx));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, opix) = (geom.patch(), geom.out_pixels());
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; geom.o];
                        for (j, chunk) in g.data().chunks(opix).enumerate() {
                            db[j % geom.o] += chunk.iter().sum::<f64>();
                        }
                        self.acc(grads, *b, Tensor::new(vec![geom.o], db));
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; geom.o * patch];
                    for n in 0..geom.n {
                        let gn = &g.data()[n * geom.o * opix..(n + 1) * geom.o * opix];
                        gemm(
                            1.0,
                            MatRef::row_major(gn, geom.o, opix),
                            MatRef::row_major(&cols[n], patch, opix).t(),
                            1.0,
                            &mut dw,
                        );
                    }
                    self.acc(grads, *w, Tensor::new(self.nodes[*w].value.shape().to_vec(), dw));
                }
                if self.rg(*x) {
                    let in_size = geom.c * geom.h * geom.w;
                    let mut dx = vec![0.0; geom.n * in_size];
                    let mut dcols = vec![0.0; patch * opix];
                    let wm = MatRef::row_major(self.nodes[*w].value.data(), geom.o, patch);
                    for n in 0..geom.n {
                        let gn = &g.data()[n * geom.o * opix..(n + 1) * geom.o * opix];
                        gemm(1.0, wm.t(), MatRef::row_major(gn, geom.o, opix), 0.0, &mut dcols);
                        col2im(&dcols, geom, &mut dx[n * in_size..(n + 1) * in_size]);
                    }
                    self.acc(grads, *x, Tensor::new(self.nodes[*x].value.shape().to_vec(), dx));
                }
            }
            Op::Upsample2(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![0.0; s.iter().product()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::UpsampleBilinear2(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![0.0; s.iter().product()];
                for (dst, src) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                    crate::tensor::bilinear2_adjoint(src, h, w, dst);
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let hw = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(sa.iter().product());
                let mut db = Vec::with_capacity(sb.iter().product());
                for n in 0..sa[0] {
                    let base = n * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    db.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.acc(grads, *a, Tensor::new(sa, da));
                self.acc(grads, *b, Tensor::new(sb, db));
            }
            Op::Silu(x) => {
                let dx = g.zip_map(&self.nodes[*x].value, |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.acc(grads, *x, dx);
            }
            Op::ToTokens(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[b * c * hw + ch * hw + p] = g.data()[b * hw * c + p * c + ch];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::FromTokens(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let (n, hw, c) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[b * hw * c + p * c + ch] = g.data()[b * c * hw + ch * hw + p];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::StackTokens(items) => {
                let s = g.shape();
                let (n, k, d) = (s[0], s[1], s[2]);
                for (j, &it) in items.iter().enumerate() {
                    if !self.rg(it) {
                        continue;
                    }
                    let mut di = vec![0.0; n * d];
                    for b in 0..n {
                        di[b * d..(b + 1) * d].copy_from_slice(&g.data()[(b * k + j) * d..(b * k + j + 1) * d]);
                    }
                    self.acc(grads, it, Tensor::new(vec![n, d], di));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.nodes[*gamma].value.len();
                let gm = self.nodes[*gamma].value.data();
                let rows = xhat.len() / d;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g.data()[r * d + j] * xhat[r * d + j];
                            dbeta[j] += g.data()[r * d + j];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(vec![d], dg));
                    self.acc(grads, *beta, Tensor::new(vec![d], dbeta));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g.data()[r * d + j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = g.data()[r * d + j] * gm[j];
                            dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(self.nodes[*x].value.shape().to_vec(), dx));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                let (bs, l, k) = (sa[0], sa[1], sa[2]);
                let s = g.shape()[2];
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                if self.rg(*a) {
                    let mut da = vec![0.0; bs * l * k];
                    for i in 0..bs {
                        let gm = MatRef::row_major(&g.data()[i * l * s..(i + 1) * l * s], l, s);
                        let bi = &bd[i * k * s..(i + 1) * k * s];
                        // trans_b: C = A B^T -> dA = G B ; else dA = G B^T
                        let bm = if *trans_b { MatRef::row_major(bi, s, k) } else { MatRef::row_major(bi, k, s).t() };
                        gemm(1.0, gm, bm, 0.0, &mut da[i * l * k..(i + 1) * l * k]);
                    }
                    self.acc(grads, *a, Tensor::new(sa.clone(), da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bs * k * s];
                    for i in 0..bs {
                        let gm = MatRef::row_major(&g.data()[i * l * s..(i + 1) * l * s], l, s);
                        let am = MatRef::row_major(&ad[i * l * k..(i + 1) * l * k], l, k);
                        if *trans_b {
                            // dB (S, K) = G^T A
                            gemm(1.0, gm.t(), am, 0.0, &mut db[i * s * k..(i + 1) * s * k]);
                        } else {
                            // dB (K, S) = A^T G
                            gemm(1.0, am.t(), gm, 0.0, &mut db[i * k * s..(i + 1) * k * s]);
                        }
                    }
                    self.acc(grads, *b, Tensor::new(sb, db));
                }
            }
            Op::SoftmaxLast(x) => {
                let d = *g.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                self.acc(grads, *x, g.reshape(&s));
            }
            Op::WeightedMse { pred, target, weights } => {
                let gs = g.item();
                let p = self.nodes[*pred].value.data();
                let t = self.nodes[*target].value.data();
                let n = weights.len();
                let per = p.len() / n;
                let mut dp = vec![0.0; p.len()];
                for i in 0..n {
                    let c = gs * 2.0 * weights[i] / (n * per) as f64;
                    for j in i * per..(i + 1) * per {
                        dp[j] = c * (p[j] - t[j]);
                    }
                }
                let shape = self.nodes[*pred].value.shape().to_vec();
                let dpt = Tensor::new(shape, dp);
                if self.rg(*target) {
                    self.acc(grads, *target, dpt.scale(-1.0));
                }
                self.acc(grads, *pred, dpt);
            }
            Op::BceLogits { logits, targets } => {
                let gs = g.item();
                let z = &self.nodes[*logits].value;
                let m = z.len() as f64;
                let dz: Vec<f64> = z.data().iter().zip(targets).map(|(&z, &y)| gs * (sigmoid(z) - y) / m).collect();
                self.acc(grads, *logits, Tensor::new(z.shape().to_vec(), dz));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; s.iter().product()];
                for (chunk, gv) in dx.chunks_mut(hw).zip(g.data()) {
                    for v in chunk {
                        *v = gv / hw as f64;
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::SumAll(x) => {
                let s = self.nodes[*x].value.shape().to_vec();
                self.acc(grads, *x, Tensor::full(&s, g.item()));
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let opix = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * opix..(row + 1) * opix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let opix = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * opix..(row + 1) * opix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
