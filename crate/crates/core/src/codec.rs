//! Convolutional autoencoder mapping grayscale images to a `c`-channel latent
//! grid downsampled by `f`, and back.
//!
//! Encoder: three 3x3 convolutions with SiLU (1 -> 32 -> 64 -> 64 channels,
//! the first `log2 f` of them strided) and a 3x3 projection to `c` channels.
//! Decoder mirrors it with nearest-neighbour upsampling. Latents are centred
//! per channel and multiplied by a stored scalar so training latents have
//! unit global std.

use autograd::{clip_global_norm, Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{quantize_f32, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::imageio::GrayImage;
use crate::latent::LatentTensor;
use crate::nn;
use crate::phantom::LabeledImage;
use crate::seed;

pub const MIN_TRAIN_IMAGES: usize = 64;
const ENC_WIDTHS: [usize; 3] = [32, 64, 64];
const DEC_WIDTHS: [usize; 3] = [64, 64, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams {
    pub params: ParamSet,
    /// Spatial downsampling factor, 4 or 8.
    pub factor: usize,
    pub latent_channels: usize,
    /// Per-channel mean of raw training latents, subtracted after encoding.
    pub latent_shift: Vec<f64>,
    /// Multiplier applied after the shift and divided out before decoding.
    pub latent_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub factor: usize,
    pub latent_channels: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// Weight of the scale-consistency term: decoding a bilinearly upsampled
    /// latent should give the bilinearly upsampled image. Keeps latent-space
    /// upscaling meaningful. 0 disables it.
    pub scale_consistency: f64,
    /// Images per batch that also get the scale-consistency term.
    pub consistency_images: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            factor: 8,
            latent_channels: 4,
            iterations: 600,
            batch_size: 8,
            lr: 2e-3,
            eval_every: 50,
            scale_consistency: 0.5,
            consistency_images: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    /// (iteration, validation MSE) of every evaluation.
    pub validation: Vec<(usize, f64)>,
    /// (iteration, validation MSE) each time a new best checkpoint was taken.
    pub best_sequence: Vec<(usize, f64)>,
    pub best_mse: f64,
}

fn strides(factor: usize) -> [usize; 3] {
    if factor == 8 {
        [2, 2, 2]
    } else {
        [2, 2, 1]
    }
}

impl CodecParams {
    pub fn init(factor: usize, latent_channels: usize, seed: u64) -> Result<Self> {
        if factor != 4 && factor != 8 {
            return Err(invalid(format!("codec factor must be 4 or 8, got {factor}")));
        }
        if latent_channels == 0 {
            return Err(invalid("latent channel count must be positive"));
        }
        let mut rng = seed::rng_for(seed, "codec/init");
        let mut p = ParamSet::new();
        let mut cin = 1;
        for (i, &w) in ENC_WIDTHS.iter().enumerate() {
            nn::init_conv(&mut p, &format!("enc.conv{i}"), cin, w, 3, &mut rng);
            cin = w;
        }
        nn::init_conv(&mut p, "enc.out", cin, latent_channels, 3, &mut rng);
        nn::init_conv(&mut p, "dec.in", latent_channels, DEC_WIDTHS[0], 3, &mut rng);
        nn::init_conv(&mut p, "dec.conv1", DEC_WIDTHS[0], DEC_WIDTHS[1], 3, &mut rng);
        nn::init_conv(&mut p, "dec.conv2", DEC_WIDTHS[1], DEC_WIDTHS[2], 3, &mut rng);
        nn::init_conv(&mut p, "dec.out", DEC_WIDTHS[2], 1, 3, &mut rng);
        Ok(Self { params: p, factor, latent_channels, latent_shift: vec![0.0; latent_channels], latent_scale: 1.0 })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Raw (unscaled) encoder on an (N, 1, H, W) batch.
    fn encoder(&self, g: &mut Graph, b: &autograd::Binding, x: Var) -> Var {
        let mut h = x;
        for (i, s) in strides(self.factor).iter().enumerate() {
            h = nn::conv(g, b, &format!("enc.conv{i}"), h, *s, 1);
            h = g.silu(h);
        }
        nn::conv(g, b, "enc.out", h, 1, 1)
    }

    /// Raw decoder on an (N, c, h, w) batch; output is not clamped.
    fn decoder(&self, g: &mut Graph, b: &autograd::Binding, z: Var) -> Var {
        let mut h = nn::conv(g, b, "dec.in", z, 1, 1);
        h = g.silu(h);
        let ups = if self.factor == 8 { 3 } else { 2 };
        for (i, name) in ["dec.conv1", "dec.conv2"].iter().enumerate() {
            if i < ups {
                h = g.upsample2(h);
            }
            h = nn::conv(g, b, name, h, 1, 1);
            h = g.silu(h);
        }
        if ups == 3 {
            h = g.upsample2(h);
        }
        nn::conv(g, b, "dec.out", h, 1, 1)
    }

    fn check_image(&self, width: usize, height: usize, len: usize) -> Result<()> {
        if len != width * height {
            return Err(Error::Shape(format!("{len} pixels for {width}x{height}")));
        }
        if width % self.factor != 0 || height % self.factor != 0 || width == 0 || height == 0 {
            return Err(invalid(format!("image {width}x{height} is not divisible by factor {}", self.factor)));
        }
        Ok(())
    }

    pub fn encode(&self, image: &GrayImage) -> Result<LatentTensor> {
        self.check_image(image.width, image.height, image.pixels.len())?;
        let x = Tensor::new(vec![1, 1, image.height, image.width], image.pixels.clone());
        let z = self.encode_tensor(&x)?;
        LatentTensor::new(z.index0(0), self.factor)
    }

    pub fn encode_square(&self, size: usize, pixels: &[f64]) -> Result<LatentTensor> {
        self.encode(&GrayImage { width: size, height: size, pixels: pixels.to_vec() })
    }

    /// Encode an (N, 1, H, W) batch into scaled latents (N, c, H/f, W/f).
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("expected (N, 1, H, W), got {s:?}")));
        }
        self.check_image(s[3], s[2], s[2] * s[3])?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = g.input(x.clone());
        let z = self.encoder(&mut g, &b, xv);
        let out = self.normalize(g.value(z));
        if !out.all_finite() {
            return Err(Error::NonFinite { step: 0, detail: "encoder produced non-finite latents".into() });
        }
        Ok(out)
    }

    /// Decode to an image clamped to [0, 1].
    pub fn decode(&self, latent: &LatentTensor) -> Result<GrayImage> {
        let (c, h, w) = latent.dims();
        let t = latent.values().clone().reshape(&[1, c, h, w]);
        let out = self.decode_tensor(&t)?;
        Ok(GrayImage { width: w * self.factor, height: h * self.factor, pixels: out.into_data() })
    }

    /// Decode an (N, c, h, w) batch into clamped images (N, 1, h f, w f).
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected (N, c, h, w), got {s:?}")));
        }
        if s[1] != self.latent_channels {
            return Err(Error::Shape(format!("latent has {} channels, codec expects {}", s[1], self.latent_channels)));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let zv = g.input(self.denormalize(z));
        let x = self.decoder(&mut g, &b, zv);
        Ok(g.value(x).map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    fn normalize(&self, raw: &Tensor) -> Tensor {
        self.per_channel(raw, |v, shift| (v - shift) * self.latent_scale)
    }

    fn denormalize(&self, z: &Tensor) -> Tensor {
        self.per_channel(z, |v, shift| v / self.latent_scale + shift)
    }

    fn per_channel(&self, t: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let s = t.shape();
        let hw = s[2] * s[3];
        let mut out = t.clone();
        for (k, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let shift = self.latent_shift[k % self.latent_channels];
            plane.iter_mut().for_each(|v| *v = f(*v, shift));
        }
        out
    }

    /// Mean squared reconstruction error over `images` (clamped output).
    pub fn reconstruction_mse(&self, images: &[LabeledImage]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in images.chunks(16) {
            let x = image_batch(chunk)?;
            let z = self.encode_tensor(&x)?;
            let y = self.decode_tensor(&z)?;
            total += x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += x.len();
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "codec",
            "factor": self.factor,
            "latent_channels": self.latent_channels,
            "latent_scale": self.latent_scale,
            "latent_shift": self.latent_shift,
        });
        Checkpoint::new(meta, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "codec" {
            return Err(Error::Checkpoint("not a codec checkpoint".into()));
        }
        let num = |k: &str| {
            ck.metadata.get(k).and_then(|v| v.as_f64()).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
        };
        let codec = Self {
            params: ck.tensors.clone(),
            factor: num("factor")? as usize,
            latent_channels: num("latent_channels")? as usize,
            latent_scale: num("latent_scale")?,
            latent_shift: serde_json::from_value(
                ck.metadata.get("latent_shift").cloned().ok_or_else(|| Error::Checkpoint("missing `latent_shift`".into()))?,
            )?,
        };
        if codec.latent_shift.len() != codec.latent_channels {
            return Err(Error::Checkpoint("latent shift length does not match channels".into()));
        }
        let reference = Self::init(codec.factor, codec.latent_channels, 0)?;
        nn::check_same_layout(&reference.params, &codec.params)?;
        Ok(codec)
    }
}

/// (N, 1, H, W) tensor from equally sized images.
pub fn image_batch(images: &[LabeledImage]) -> Result<Tensor> {
    let size = images.first().map(|i| i.size).ok_or_else(|| invalid("empty image batch"))?;
    if images.iter().any(|i| i.size != size) {
        return Err(Error::Shape("images in a batch must share a size".into()));
    }
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 1, size, size], data))
}

/// Train on `train`, evaluating on `validation` every `eval_every` iterations
/// and returning the best checkpoint seen. The latent scale is fitted on the
/// training set afterwards.
pub fn train_codec(
    train: &[LabeledImage],
    validation: &[LabeledImage],
    config: &CodecTrainConfig,
    seed: u64,
) -> Result<(CodecParams, CodecTrainReport)> {
    if train.len() < MIN_TRAIN_IMAGES {
        return Err(invalid(format!("codec training needs at least {MIN_TRAIN_IMAGES} images, got {}", train.len())));
    }
    if validation.is_empty() {
        return Err(invalid("codec training needs validation images"));
    }
    if config.batch_size == 0 || config.iterations == 0 || config.eval_every == 0 {
        return Err(invalid("batch size, iterations and eval interval must be positive"));
    }
    let mut codec = CodecParams::init(config.factor, config.latent_channels, seed)?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut rng = seed::rng_for(seed, "codec/order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut report = CodecTrainReport { best_mse: f64::INFINITY, ..Default::default() };
    let mut best = codec.params.clone();

    for it in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let x = image_batch(&batch)?;
        let mut g = Graph::new();
        let b = codec.params.bind(&mut g, true);
        let xv = g.input(x);
        let z = codec.encoder(&mut g, &b, xv);
        let y = codec.decoder(&mut g, &b, z);
        let w = vec![1.0; batch.len()];
        let mut loss = g.weighted_mse(y, xv, &w);
        let k = config.consistency_images.min(batch.len());
        if config.scale_consistency > 0.0 && k > 0 {
            let xs = image_batch(&batch[..k])?;
            let target = g.input(autograd::upsample_bilinear2(&xs));
            let xs = g.input(xs);
            let zs = codec.encoder(&mut g, &b, xs);
            let up = g.upsample_bilinear2(zs);
            let ys = codec.decoder(&mut g, &b, up);
            let extra = g.weighted_mse(ys, target, &vec![1.0; k]);
            let extra = g.scale(extra, config.scale_consistency);
            loss = g.add(loss, extra);
        }
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("codec loss {lv}") });
        }
        let mut grads = g.backward(loss);
        let mut gmap = b.grads(&g, &mut grads);
        clip_global_norm(&mut gmap, 1.0);
        let lr = nn::cosine_lr(config.lr, it, config.iterations);
        opt.step(&mut codec.params, &gmap, lr);

        if (it + 1) % config.eval_every == 0 || it + 1 == config.iterations {
            let mse = codec.reconstruction_mse(validation)?;
            log::debug!("codec it {} train {lv:.5} val {mse:.5}", it + 1);
            report.validation.push((it + 1, mse));
            if mse < report.best_mse {
                report.best_mse = mse;
                report.best_sequence.push((it + 1, mse));
                best = codec.params.clone();
            }
        }
    }
    codec.params = best;
    balance_channels(&mut codec, train)?;
    quantize_f32(&mut codec.params);
    fit_normalization(&mut codec, train)?;
    Ok((codec, report))
}

/// Rotate the latent channels by an orthogonal Q folded into `enc.out` and
/// `dec.in`, so the decoded output is unchanged while every channel gets the
/// same variance: Q = H V^T with V the eigenvectors of the channel covariance
/// and H a normalised Hadamard matrix, whose entries all have magnitude
/// 1/sqrt(c). Skipped when c is not a power of two.
fn balance_channels(codec: &mut CodecParams, images: &[LabeledImage]) -> Result<()> {
    let c = codec.latent_channels;
    if !c.is_power_of_two() || c == 1 {
        return Ok(());
    }
    let raw = CodecParams { latent_scale: 1.0, latent_shift: vec![0.0; c], ..codec.clone() };
    let cov = channel_covariance(&raw, images)?;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let q = hadamard(c) * eig.eigenvectors.transpose();

    let w = codec.params.require("enc.out.w")?.clone();
    let per_out = w.len() / c;
    let mut nw = vec![0.0; w.len()];
    for o in 0..c {
        for i in 0..c {
            let qoi = q[(o, i)];
            for k in 0..per_out {
                nw[o * per_out + k] += qoi * w.data()[i * per_out + k];
            }
        }
    }
    let b = codec.params.require("enc.out.b")?.clone();
    let nb: Vec<f64> = (0..c).map(|o| (0..c).map(|i| q[(o, i)] * b.data()[i]).sum()).collect();
    codec.params.insert("enc.out.w", Tensor::new(w.shape().to_vec(), nw));
    codec.params.insert("enc.out.b", Tensor::new(vec![c], nb));

    // dec.in weight (cout, c, k, k): W' = W Q^T along the input-channel axis
    let d = codec.params.require("dec.in.w")?.clone();
    let (cout, kk) = (d.shape()[0], d.shape()[2] * d.shape()[3]);
    let mut nd = vec![0.0; d.len()];
    for o in 0..cout {
        for j in 0..c {
            for i in 0..c {
                let qji = q[(j, i)];
                for k in 0..kk {
                    nd[(o * c + j) * kk + k] += d.data()[(o * c + i) * kk + k] * qji;
                }
            }
        }
    }
    codec.params.insert("dec.in.w", Tensor::new(d.shape().to_vec(), nd));
    Ok(())
}

fn hadamard(n: usize) -> nalgebra::DMatrix<f64> {
    let mut h = nalgebra::DMatrix::from_element(1, 1, 1.0);
    while h.nrows() < n {
        let m = h.nrows();
        let mut next = nalgebra::DMatrix::zeros(2 * m, 2 * m);
        next.view_mut((0, 0), (m, m)).copy_from(&h);
        next.view_mut((0, m), (m, m)).copy_from(&h);
        next.view_mut((m, 0), (m, m)).copy_from(&h);
        next.view_mut((m, m), (m, m)).copy_from(&(-&h));
        h = next;
    }
    h / (n as f64).sqrt()
}

fn channel_covariance(codec: &CodecParams, images: &[LabeledImage]) -> Result<nalgebra::DMatrix<f64>> {
    let c = codec.latent_channels;
    let mut sum = nalgebra::DVector::<f64>::zeros(c);
    let mut outer = nalgebra::DMatrix::<f64>::zeros(c, c);
    let mut n = 0usize;
    for chunk in images.chunks(16) {
        let z = codec.encode_tensor(&image_batch(chunk)?)?;
        let s = z.shape().to_vec();
        let hw = s[2] * s[3];
        for img in z.data().chunks(c * hw) {
            for p in 0..hw {
                let v = nalgebra::DVector::from_fn(c, |k, _| img[k * hw + p]);
                sum += &v;
                outer += &v * v.transpose();
            }
        }
        n += s[0] * hw;
    }
    let mean = sum / n as f64;
    Ok(outer / n as f64 - &mean * mean.transpose())
}

/// Channel means of the raw training latents become the shift; the scale is
/// 1 / global std of the shifted latents.
fn fit_normalization(codec: &mut CodecParams, images: &[LabeledImage]) -> Result<()> {
    let raw = CodecParams { latent_scale: 1.0, latent_shift: vec![0.0; codec.latent_channels], ..codec.clone() };
    let stats = latent_stats(&raw, images)?;
    codec.latent_shift = stats.channel_mean.iter().map(|m| f64::from(*m as f32)).collect();
    let centred = CodecParams { latent_scale: 1.0, ..codec.clone() };
    let std = latent_stats(&centred, images)?.global_std;
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::Diverged { iteration: 0, detail: format!("latent std {std}") });
    }
    codec.latent_scale = f64::from((1.0 / std) as f32);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub global_mean: f64,
    pub global_std: f64,
    pub channel_mean: Vec<f64>,
    /// Std of each latent channel over all images and positions.
    pub channel_std: Vec<f64>,
}

pub fn latent_stats(codec: &CodecParams, images: &[LabeledImage]) -> Result<LatentStats> {
    let c = codec.latent_channels;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut n = 0usize;
    for chunk in images.chunks(16) {
        let z = codec.encode_tensor(&image_batch(chunk)?)?;
        let s = z.shape().to_vec();
        let hw = s[2] * s[3];
        for (k, plane) in z.data().chunks(hw).enumerate() {
            let ch = k % c;
            sum[ch] += plane.iter().sum::<f64>();
            sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
        }
        n += s[0] * hw;
    }
    let nf = n as f64;
    let channel_mean = (0..c).map(|k| sum[k] / nf).collect();
    let channel_std = (0..c).map(|k| (sq[k] / nf - (sum[k] / nf).powi(2)).max(0.0).sqrt()).collect();
    let total = nf * c as f64;
    let mean = sum.iter().sum::<f64>() / total;
    let var = sq.iter().sum::<f64>() / total - mean * mean;
    Ok(LatentStats { global_mean: mean, global_std: var.max(0.0).sqrt(), channel_mean, channel_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::findings::{FindingLabel, LabelVector};
    use crate::phantom::generate_phantom;

    fn imgs(n: usize, size: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| generate_phantom(&LabelVector::single(FindingLabel::from_index(i % 14).unwrap()), size, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn shapes_follow_the_factor() {
        let codec = CodecParams::init(8, 4, 0).unwrap();
        let img = &imgs(1, 64)[0];
        let z = codec.encode_square(64, &img.pixels).unwrap();
        assert_eq!(z.dims(), (4, 8, 8));
        let x = codec.decode(&z).unwrap();
        assert_eq!((x.width, x.height), (64, 64));
        assert!(x.pixels.iter().all(|v| (0.0..=1.0).contains(v)));

        let codec4 = CodecParams::init(4, 4, 0).unwrap();
        assert_eq!(codec4.encode_square(64, &img.pixels).unwrap().dims(), (4, 16, 16));
    }

    #[test]
    fn encode_is_deterministic_and_zero_latent_decodes_in_range() {
        let codec = CodecParams::init(8, 4, 3).unwrap();
        let img = &imgs(1, 32)[0];
        assert_eq!(codec.encode_square(32, &img.pixels).unwrap(), codec.encode_square(32, &img.pixels).unwrap());
        let x = codec.decode(&LatentTensor::zeros(4, 4, 4, 8)).unwrap();
        assert!(x.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_geometry() {
        let codec = CodecParams::init(8, 4, 0).unwrap();
        assert!(codec.encode(&GrayImage { width: 60, height: 60, pixels: vec![0.0; 3600] }).is_err());
        assert!(codec.decode(&LatentTensor::zeros(3, 8, 8, 8)).is_err());
        assert!(CodecParams::init(2, 4, 0).is_err());
    }

    #[test]
    fn perturbations_stay_finite() {
        let codec = CodecParams::init(8, 4, 1).unwrap();
        let mut img = imgs(1, 32)[0].pixels.clone();
        for delta in [-1.0, -0.5, 0.5, 1.0] {
            img[100] += delta;
            let z = codec.encode_square(32, &img).unwrap();
            assert!(z.values().all_finite());
            img[100] -= delta;
        }
    }

    #[test]
    fn hadamard_is_orthogonal_with_flat_magnitudes() {
        let h = hadamard(4);
        let eye = &h * h.transpose();
        for i in 0..4 {
            for j in 0..4 {
                assert!((eye[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                assert!((h[(i, j)].abs() - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_balancing_preserves_reconstruction_and_equalises_variance() {
        let data = imgs(24, 32);
        let mut codec = CodecParams::init(8, 4, 5).unwrap();
        let before = codec.reconstruction_mse(&data).unwrap();
        let x = image_batch(&data[..2]).unwrap();
        let y0 = codec.decode_tensor(&codec.encode_tensor(&x).unwrap()).unwrap();
        balance_channels(&mut codec, &data).unwrap();
        let y1 = codec.decode_tensor(&codec.encode_tensor(&x).unwrap()).unwrap();
        assert!(y0.max_abs_diff(&y1) < 1e-9);
        assert!((codec.reconstruction_mse(&data).unwrap() - before).abs() < 1e-9);
        let stats = latent_stats(&codec, &data).unwrap();
        let v: Vec<f64> = stats.channel_std.iter().map(|s| s * s).collect();
        for w in &v {
            assert!((w - v[0]).abs() < 1e-9 * v[0].max(1.0), "{v:?}");
        }
    }

    #[test]
    fn too_few_images_is_rejected() {
        let d = imgs(10, 32);
        assert!(train_codec(&d, &d, &CodecTrainConfig::default(), 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = CodecParams { latent_scale: 0.75, latent_shift: vec![0.5, -1.0, 0.0, 2.0], ..CodecParams::init(8, 4, 2).unwrap() };
        let back = CodecParams::from_checkpoint(&Checkpoint::from_bytes(&codec.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.factor, 8);
        assert_eq!(back.latent_scale, 0.75);
        assert_eq!(back.latent_shift, codec.latent_shift);
        assert_eq!(back.params.num_values(), codec.params.num_values());
    }
}
