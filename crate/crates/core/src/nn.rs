//! Parameter initialisation and layer helpers shared by the networks.

use autograd::{Binding, Graph, ParamSet, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// He-normal 3x3 (or k x k) convolution weight plus zero bias.
pub fn init_conv<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Linear weight (out, in) with std 1/sqrt(in), plus zero bias when `bias`.
pub fn init_linear<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, din: usize, dout: usize, bias: bool, rng: &mut R) {
    let std = 1.0 / (din as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[dout, din], std, rng));
    if bias {
        p.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
    }
}

pub fn init_norm(p: &mut ParamSet, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub fn conv(g: &mut Graph, b: &Binding, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    g.conv2d(x, w, bias, stride, pad)
}

pub fn linear(g: &mut Graph, b: &Binding, name: &str, x: Var) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    g.linear(x, w, bias)
}

pub fn norm(g: &mut Graph, b: &Binding, name: &str, x: Var) -> Var {
    let gamma = b.var(&format!("{name}.g"));
    let beta = b.var(&format!("{name}.b"));
    g.layer_norm(x, gamma, beta)
}

/// Cosine decay from `base` to 10% of `base`, with a 5% linear warm-up.
pub fn cosine_lr(base: f64, it: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if it < warm {
        return base * (it + 1) as f64 / warm as f64;
    }
    let p = (it - warm) as f64 / (total - warm).max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Loaded tensors must match the freshly initialised layout name for name.
pub fn check_same_layout(reference: &ParamSet, loaded: &ParamSet) -> Result<()> {
    if reference.len() != loaded.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", reference.len(), loaded.len())));
    }
    for (name, t) in reference.iter() {
        let got = loaded.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    Ok(())
}
