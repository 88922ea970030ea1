//! Conditional noise-prediction network and its Min-SNR weighted training.
//!
//! Layout on a (c, h, w) latent, h and w even:
//!
//! ```text
//! conv_in c->32, ResBlock(32)              skip at (h, w)
//! conv stride 2 32->64, ResBlock(64)       (h/2, w/2)
//! transformer block d=64:                  self-attn, cross-attn, feed-forward
//! upsample, conv 64->32, concat skip, conv 64->32, ResBlock(32), conv_out 32->c
//! ```
//!
//! ResBlocks add a per-channel projection of the timestep embedding. The
//! cross-attention context is the two prompt tokens, each lifted to d=64 by a
//! fixed-shape projection. Every attention and feed-forward matrix is d x d
//! and listed in the attachment registry.

use std::collections::BTreeMap;

use autograd::{clip_global_norm, Adam, AdamConfig, Binding, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{quantize_f32, Checkpoint};
use crate::codec::{image_batch, CodecParams};
use crate::conditioning::{embed_labels, null_embedding, PromptEmbedding, D1, D2};
use crate::error::{invalid, Error, Result};
use crate::latent::LatentTensor;
use crate::lora::AdapterSet;
use crate::nn;
use crate::phantom::LabeledImage;
use crate::scheduler::{self, NoiseSchedule};
use crate::seed;

pub const TIME_FREQS: usize = 16;
pub const DEFAULT_GUIDANCE: f64 = 5.0;

/// Registry names of the LoRA-attachable projections.
pub const ATTACHMENT_LAYERS: [&str; 10] = [
    "mid.attn1.q",
    "mid.attn1.k",
    "mid.attn1.v",
    "mid.attn1.o",
    "mid.attn2.q",
    "mid.attn2.k",
    "mid.attn2.v",
    "mid.attn2.o",
    "mid.ff.w1",
    "mid.ff.w2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Width of the lower level; also the attention dimension d.
    pub model_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { latent_channels: 4, base_width: 32, model_dim: 64, time_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn init_resblock<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, ch: usize, tdim: usize, rng: &mut R) {
    nn::init_conv(p, &format!("{name}.conv1"), ch, ch, 3, rng);
    nn::init_linear(p, &format!("{name}.temb"), tdim, ch, true, rng);
    nn::init_conv(p, &format!("{name}.conv2"), ch, ch, 3, rng);
    // start each residual branch near zero
    if let Some(w) = p.get_mut(&format!("{name}.conv2.w")) {
        *w = w.scale(0.1);
    }
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let DenoiserConfig { latent_channels: c, base_width: w, model_dim: d, time_dim: td } = config;
        if c == 0 || w == 0 || d == 0 || td == 0 {
            return Err(invalid("denoiser widths must be positive"));
        }
        let mut rng = seed::rng_for(seed, "denoiser/init");
        let mut p = ParamSet::new();
        nn::init_linear(&mut p, "time.l1", 2 * TIME_FREQS, td, true, &mut rng);
        nn::init_linear(&mut p, "time.l2", td, td, true, &mut rng);
        nn::init_conv(&mut p, "conv_in", c, w, 3, &mut rng);
        init_resblock(&mut p, "down.res", w, td, &mut rng);
        nn::init_conv(&mut p, "down.conv", w, d, 3, &mut rng);
        init_resblock(&mut p, "mid.res", d, td, &mut rng);
        for n in ["mid.norm1", "mid.norm2", "mid.norm3"] {
            nn::init_norm(&mut p, n, d);
        }
        for name in ATTACHMENT_LAYERS {
            let bias = name.ends_with(".o") || name.contains(".ff.");
            nn::init_linear(&mut p, name, d, d, bias, &mut rng);
        }
        for name in ["mid.attn1.o", "mid.attn2.o", "mid.ff.w2"] {
            if let Some(t) = p.get_mut(&format!("{name}.w")) {
                *t = t.scale(0.1);
            }
        }
        nn::init_linear(&mut p, "ctx.enc1", D1, d, true, &mut rng);
        nn::init_linear(&mut p, "ctx.enc2", D2, d, true, &mut rng);
        nn::init_conv(&mut p, "up.conv", d, w, 3, &mut rng);
        nn::init_conv(&mut p, "up.merge", 2 * w, w, 3, &mut rng);
        init_resblock(&mut p, "up.res", w, td, &mut rng);
        nn::init_conv(&mut p, "conv_out", w, c, 3, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Layer name -> (rows, cols) of every attachable projection matrix.
    pub fn attachment_registry(&self) -> BTreeMap<String, (usize, usize)> {
        ATTACHMENT_LAYERS
            .iter()
            .map(|n| {
                let s = self.params.get(&format!("{n}.w")).expect("registry layers exist").shape();
                (n.to_string(), (s[0], s[1]))
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "denoiser",
            "config": self.config,
            "layers": self.params.names().collect::<Vec<_>>(),
        });
        Checkpoint::new(meta, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "denoiser" {
            return Err(Error::Checkpoint("not a denoiser checkpoint".into()));
        }
        let config: DenoiserConfig = serde_json::from_value(
            ck.metadata.get("config").cloned().ok_or_else(|| Error::Checkpoint("missing `config`".into()))?,
        )?;
        nn::check_same_layout(&Self::init(config, 0)?.params, &ck.tensors)?;
        Ok(Self { config, params: ck.tensors.clone() })
    }
}

/// Sinusoidal features of integer timesteps, (N, 2 * TIME_FREQS).
pub fn timestep_features(ts: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * 2 * TIME_FREQS);
    for &t in ts {
        for k in 0..TIME_FREQS {
            let f = (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
            data.push((t as f64 * f).sin());
        }
        for k in 0..TIME_FREQS {
            let f = (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
            data.push((t as f64 * f).cos());
        }
    }
    Tensor::new(vec![ts.len(), 2 * TIME_FREQS], data)
}

/// Prompt tokens as (N, D1) and (N, D2) tensors.
pub fn context_tensors(conds: &[&PromptEmbedding]) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(conds.len() * D1);
    let mut b = Vec::with_capacity(conds.len() * D2);
    for c in conds {
        if c.dims() != (D1, D2) {
            return Err(Error::Shape(format!("prompt embedding dims {:?}, expected ({D1}, {D2})", c.dims())));
        }
        a.extend_from_slice(&c.token1);
        b.extend_from_slice(&c.token2);
    }
    Ok((Tensor::new(vec![conds.len(), D1], a), Tensor::new(vec![conds.len(), D2], b)))
}

/// Tape-level network with optional LoRA bindings.
pub struct Net<'a> {
    pub base: &'a Binding,
    /// Adapter binding and its (alpha / r) scale.
    pub lora: Option<(&'a Binding, f64)>,
}

impl Net<'_> {
    fn proj(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let y = nn::linear(g, self.base, name, x);
        let Some((lb, scale)) = self.lora else { return y };
        let (Some(a), Some(b)) = (lb.get(&format!("{name}.lora_a")), lb.get(&format!("{name}.lora_b"))) else {
            return y;
        };
        let h = g.linear(x, b, None);
        let h = g.linear(h, a, None);
        let h = g.scale(h, scale);
        g.add(y, h)
    }

    fn resblock(&self, g: &mut Graph, name: &str, x: Var, temb: Var) -> Var {
        let h = g.silu(x);
        let h = nn::conv(g, self.base, &format!("{name}.conv1"), h, 1, 1);
        let t = nn::linear(g, self.base, &format!("{name}.temb"), temb);
        let h = g.add_channel(h, t);
        let h = g.silu(h);
        let h = nn::conv(g, self.base, &format!("{name}.conv2"), h, 1, 1);
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, prefix: &str, q_in: Var, kv_in: Var) -> Var {
        let d = g.shape(q_in)[2];
        let q = self.proj(g, &format!("{prefix}.q"), q_in);
        let k = self.proj(g, &format!("{prefix}.k"), kv_in);
        let v = self.proj(g, &format!("{prefix}.v"), kv_in);
        let s = g.bmm(q, k, true);
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let p = g.softmax_last(s);
        let o = g.bmm(p, v, false);
        self.proj(g, &format!("{prefix}.o"), o)
    }

    /// Predicted noise for model inputs `x` (N, c, h, w).
    pub fn forward(&self, g: &mut Graph, x: Var, time: Var, ctx1: Var, ctx2: Var) -> Var {
        let temb = nn::linear(g, self.base, "time.l1", time);
        let temb = g.silu(temb);
        let temb = nn::linear(g, self.base, "time.l2", temb);
        let temb = g.silu(temb);

        let h = nn::conv(g, self.base, "conv_in", x, 1, 1);
        let skip = self.resblock(g, "down.res", h, temb);
        let h = nn::conv(g, self.base, "down.conv", skip, 2, 1);
        let h = self.resblock(g, "mid.res", h, temb);

        let (hh, ww) = (g.shape(h)[2], g.shape(h)[3]);
        let tok = g.to_tokens(h);
        let c1 = nn::linear(g, self.base, "ctx.enc1", ctx1);
        let c2 = nn::linear(g, self.base, "ctx.enc2", ctx2);
        let ctx = g.stack_tokens(&[c1, c2]);

        let n = nn::norm(g, self.base, "mid.norm1", tok);
        let a = self.attention(g, "mid.attn1", n, n);
        let tok = g.add(tok, a);
        let n = nn::norm(g, self.base, "mid.norm2", tok);
        let a = self.attention(g, "mid.attn2", n, ctx);
        let tok = g.add(tok, a);
        let n = nn::norm(g, self.base, "mid.norm3", tok);
        let f = self.proj(g, "mid.ff.w1", n);
        let f = g.silu(f);
        let f = self.proj(g, "mid.ff.w2", f);
        let tok = g.add(tok, f);
        let h = g.from_tokens(tok, hh, ww);

        let h = g.upsample2(h);
        let h = nn::conv(g, self.base, "up.conv", h, 1, 1);
        let h = g.silu(h);
        let h = g.concat_channels(h, skip);
        let h = nn::conv(g, self.base, "up.merge", h, 1, 1);
        let h = self.resblock(g, "up.res", h, temb);
        let h = g.silu(h);
        nn::conv(g, self.base, "conv_out", h, 1, 1)
    }
}

fn check_latent_geometry(config: &DenoiserConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != config.latent_channels {
        return Err(Error::Shape(format!("expected (N, {}, h, w), got {shape:?}", config.latent_channels)));
    }
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::Shape(format!("latent height and width must be even, got {shape:?}")));
    }
    Ok(())
}

/// Batched prediction: one timestep and one prompt per sample.
pub fn predict_noise_batch(
    params: &DenoiserParams,
    adapters: Option<&AdapterSet>,
    x: &Tensor,
    ts: &[usize],
    conds: &[&PromptEmbedding],
) -> Result<Tensor> {
    check_latent_geometry(&params.config, x.shape())?;
    let n = x.shape()[0];
    if ts.len() != n || conds.len() != n {
        return Err(Error::Shape(format!("{n} latents, {} timesteps, {} prompts", ts.len(), conds.len())));
    }
    let (c1, c2) = context_tensors(conds)?;
    let mut g = Graph::new();
    let base = params.params.bind(&mut g, false);
    let lora_params = adapters.map(|a| a.to_params());
    let lb = lora_params.as_ref().map(|p| p.bind(&mut g, false));
    let net = Net { base: &base, lora: lb.as_ref().zip(adapters.map(|a| a.scale())) };
    let xv = g.input(x.clone());
    let tv = g.input(timestep_features(ts));
    let c1 = g.input(c1);
    let c2 = g.input(c2);
    let out = net.forward(&mut g, xv, tv, c1, c2);
    Ok(g.value(out).clone())
}

/// eps_theta(z_t, t, cond) for one latent.
pub fn predict_noise(params: &DenoiserParams, z_t: &LatentTensor, t: usize, cond: &PromptEmbedding) -> Result<Tensor> {
    let (c, h, w) = z_t.dims();
    let x = z_t.values().clone().reshape(&[1, c, h, w]);
    Ok(predict_noise_batch(params, None, &x, &[t], &[cond])?.reshape(&[c, h, w]))
}

/// eps_u + s (eps_c - eps_u) for a batch sharing timestep `t`; with s = 1
/// only the conditional branch is evaluated.
pub fn guided_predict_batch(
    params: &DenoiserParams,
    adapters: Option<&AdapterSet>,
    x: &Tensor,
    t: usize,
    conds: &[&PromptEmbedding],
    guidance_scale: f64,
) -> Result<Tensor> {
    if !(guidance_scale >= 1.0) {
        return Err(invalid(format!("guidance scale must be >= 1, got {guidance_scale}")));
    }
    let n = x.shape().first().copied().unwrap_or(0);
    if guidance_scale == 1.0 {
        return predict_noise_batch(params, adapters, x, &vec![t; n], conds);
    }
    let null = null_embedding();
    let both = Tensor::stack(&[x.clone(), x.clone()]);
    let mut shape = x.shape().to_vec();
    shape[0] *= 2;
    let both = both.reshape(&shape);
    let mut all: Vec<&PromptEmbedding> = conds.to_vec();
    all.extend(std::iter::repeat_n(&null, n));
    let out = predict_noise_batch(params, adapters, &both, &vec![t; 2 * n], &all)?;
    let half = out.len() / 2;
    let (ec, eu) = out.data().split_at(half);
    let data = ec.iter().zip(eu).map(|(c, u)| u + guidance_scale * (c - u)).collect();
    Ok(Tensor::new(x.shape().to_vec(), data))
}

pub fn guided_predict(
    params: &DenoiserParams,
    z_t: &LatentTensor,
    t: usize,
    cond: &PromptEmbedding,
    guidance_scale: f64,
) -> Result<Tensor> {
    let (c, h, w) = z_t.dims();
    let x = z_t.values().clone().reshape(&[1, c, h, w]);
    Ok(guided_predict_batch(params, None, &x, t, &[cond], guidance_scale)?.reshape(&[c, h, w]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub gamma: f64,
    pub guidance_dropout: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 32,
            iterations: 3000,
            gamma: scheduler::DEFAULT_GAMMA,
            guidance_dropout: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(invalid("gamma must be positive"));
        }
        if !(0.0..1.0).contains(&self.guidance_dropout) {
            return Err(invalid("guidance dropout must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.iterations == 0 || !(self.lr > 0.0) {
            return Err(invalid("batch size, iterations and learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Weighted loss on a frozen validation batch before and after training.
    pub validation_start: f64,
    pub validation_end: f64,
    /// How many samples had their prompt replaced by the null embedding.
    pub null_uses: usize,
    pub samples_seen: usize,
}

/// Encoded training latent with its prompt embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub latent: Tensor,
    pub cond: PromptEmbedding,
}

pub fn encode_examples(codec: &CodecParams, images: &[LabeledImage]) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let z = codec.encode_tensor(&image_batch(chunk)?)?;
        for (i, img) in chunk.iter().enumerate() {
            out.push(TrainExample { latent: z.index0(i), cond: embed_labels(&img.labels) });
        }
    }
    Ok(out)
}

/// A noised minibatch with its targets and Min-SNR weights.
pub(crate) struct NoisedBatch {
    pub x: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
    pub weights: Vec<f64>,
    pub conds: Vec<PromptEmbedding>,
}

pub(crate) fn noised_batch<R: Rng>(
    examples: &[&TrainExample],
    schedule: &NoiseSchedule,
    gamma: f64,
    dropout: f64,
    rng: &mut R,
    null_uses: &mut usize,
) -> Result<NoisedBatch> {
    let mut xs = Vec::with_capacity(examples.len());
    let mut es = Vec::with_capacity(examples.len());
    let mut ts = Vec::with_capacity(examples.len());
    let mut weights = Vec::with_capacity(examples.len());
    let mut conds = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = rng.random_range(1..=schedule.num_steps());
        let eps = Tensor::randn(ex.latent.shape(), 1.0, rng);
        xs.push(scheduler::forward_noise_tensor(&ex.latent, t, &eps, schedule)?);
        es.push(eps);
        weights.push(scheduler::minsnr_weight(t, gamma, schedule)?);
        ts.push(t);
        let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
        if drop {
            *null_uses += 1;
            conds.push(null_embedding());
        } else {
            conds.push(ex.cond.clone());
        }
    }
    Ok(NoisedBatch { x: Tensor::stack(&xs), eps: Tensor::stack(&es), ts, weights, conds })
}

/// Weighted noise MSE of a batch on a fresh tape.
pub(crate) fn batch_loss(
    g: &mut Graph,
    net: &Net<'_>,
    batch: &NoisedBatch,
) -> Result<Var> {
    let refs: Vec<&PromptEmbedding> = batch.conds.iter().collect();
    let (c1, c2) = context_tensors(&refs)?;
    let x = g.input(batch.x.clone());
    let tv = g.input(timestep_features(&batch.ts));
    let c1 = g.input(c1);
    let c2 = g.input(c2);
    let pred = net.forward(g, x, tv, c1, c2);
    let target = g.input(batch.eps.clone());
    Ok(g.weighted_mse(pred, target, &batch.weights))
}

/// Frozen validation batch: fixed examples, timesteps and noise.
pub(crate) fn validation_batch(examples: &[TrainExample], schedule: &NoiseSchedule, gamma: f64, seed: u64) -> Result<NoisedBatch> {
    let mut rng = seed::rng_for(seed, "denoiser/validation");
    let take = examples.len().min(32);
    let chosen: Vec<&TrainExample> = examples.iter().take(take).collect();
    let mut unused = 0;
    noised_batch(&chosen, schedule, gamma, 0.0, &mut rng, &mut unused)
}

pub(crate) fn eval_loss(params: &DenoiserParams, adapters: Option<&AdapterSet>, batch: &NoisedBatch) -> Result<f64> {
    let mut g = Graph::new();
    let base = params.params.bind(&mut g, false);
    let lp = adapters.map(|a| a.to_params());
    let lb = lp.as_ref().map(|p| p.bind(&mut g, false));
    let net = Net { base: &base, lora: lb.as_ref().zip(adapters.map(|a| a.scale())) };
    let l = batch_loss(&mut g, &net, batch)?;
    Ok(g.value(l).item())
}

/// Cycles through a shuffled index order, reshuffling each epoch.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    pub fn next_batch<R: Rng>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Encode `images` with the codec and train on them.
pub fn train_denoiser(
    params: DenoiserParams,
    codec: &CodecParams,
    images: &[LabeledImage],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    let examples = encode_examples(codec, images)?;
    train_on_examples(params, &examples, schedule, config)
}

pub fn train_on_examples(
    mut params: DenoiserParams,
    examples: &[TrainExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(invalid("denoiser training needs a non-empty dataset"));
    }
    let val = validation_batch(examples, schedule, config.gamma, config.seed)?;
    let mut report = TrainReport { validation_start: eval_loss(&params, None, &val)?, ..Default::default() };
    let mut rng = seed::rng_for(config.seed, "denoiser/train");
    let mut sampler = EpochSampler::new(examples.len());
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });

    for it in 0..config.iterations {
        let idx = sampler.next_batch(config.batch_size, &mut rng);
        let chosen: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = noised_batch(&chosen, schedule, config.gamma, config.guidance_dropout, &mut rng, &mut report.null_uses)?;
        let mut g = Graph::new();
        let base = params.params.bind(&mut g, true);
        let net = Net { base: &base, lora: None };
        let loss = batch_loss(&mut g, &net, &batch)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("denoiser loss {lv}") });
        }
        let mut grads = g.backward(loss);
        let mut gmap = base.grads(&g, &mut grads);
        clip_global_norm(&mut gmap, config.grad_clip);
        opt.step(&mut params.params, &gmap, nn::cosine_lr(config.lr, it, config.iterations));
        report.losses.push(lv);
        report.samples_seen += chosen.len();
        if (it + 1) % 500 == 0 {
            log::info!("denoiser it {} loss {:.4}", it + 1, mean_tail(&report.losses, 100));
        }
    }
    quantize_f32(&mut params.params);
    report.validation_end = eval_loss(&params, None, &val)?;
    Ok((params, report))
}

pub(crate) fn mean_tail(v: &[f64], n: usize) -> f64 {
    let tail = &v[v.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}
