//! Prompt-conditional generation: Euler sampling with classifier-free
//! guidance in latent space, then decoding.

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::CodecParams;
use crate::conditioning::{embed_labels, PromptEmbedding};
use crate::denoiser::{guided_predict_batch, DenoiserParams, DEFAULT_GUIDANCE};
use crate::error::Result;
use crate::findings::LabelVector;
use crate::imageio::GrayImage;
use crate::lora::AdapterSet;
use crate::multidiffusion::{self, TileLayout};
use crate::scheduler::{self, NoiseSchedule, TimestepSelection, DEFAULT_INFERENCE_STEPS};
use crate::seed;
use crate::upscaler::{self, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    /// Samples denoised together in one batch.
    pub batch: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { steps: DEFAULT_INFERENCE_STEPS, guidance: DEFAULT_GUIDANCE, batch: 64 }
    }
}

/// Generator bundle; adapters, when present, are applied lazily.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub denoiser: &'a DenoiserParams,
    pub adapters: Option<&'a AdapterSet>,
    pub codec: &'a CodecParams,
    pub schedule: &'a NoiseSchedule,
}

impl Generator<'_> {
    /// Noise for sample `index`; independent of batching.
    pub fn initial_noise(&self, shape: &[usize], seed: u64, index: u64) -> Tensor {
        scheduler::initial_latent(shape, self.schedule, seed::derive_index(seed, "sample", index))
    }

    /// Sample `n` latents of shape (c, h, w) for one prompt.
    pub fn sample_latents(
        &self,
        cond: &PromptEmbedding,
        n: usize,
        hw: (usize, usize),
        options: &SampleOptions,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        let c = self.denoiser.config.latent_channels;
        let steps = TimestepSelection::leading(self.schedule, options.steps)?;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let m = options.batch.max(1).min(n - start);
            let noise: Vec<Tensor> =
                (start..start + m).map(|i| self.initial_noise(&[c, hw.0, hw.1], seed, i as u64)).collect();
            let z = Tensor::stack(&noise);
            let conds = vec![cond; m];
            let z0 = scheduler::euler_sample(
                |x, t| guided_predict_batch(self.denoiser, self.adapters, x, t, &conds, options.guidance),
                &z,
                &steps,
                self.schedule,
            )?;
            out.extend((0..m).map(|i| z0.index0(i)));
            start += m;
        }
        Ok(out)
    }

    pub fn decode_all(&self, latents: &[Tensor]) -> Result<Vec<GrayImage>> {
        let mut images = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(32) {
            let batch = self.codec.decode_tensor(&Tensor::stack(chunk))?;
            let s = batch.shape().to_vec();
            for i in 0..s[0] {
                images.push(GrayImage { width: s[3], height: s[2], pixels: batch.index0(i).into_data() });
            }
        }
        Ok(images)
    }

    /// Guided noise prediction for any batch size under one prompt.
    pub fn eps_fn<'b>(&'b self, cond: &'b PromptEmbedding, guidance: f64) -> impl FnMut(&Tensor, usize) -> Result<Tensor> + 'b {
        move |x: &Tensor, t: usize| {
            let conds = vec![cond; x.shape()[0]];
            guided_predict_batch(self.denoiser, self.adapters, x, t, &conds, guidance)
        }
    }

    /// One canvas-sized latent sampled by tiled fusion; `index` picks the noise.
    pub fn sample_canvas(
        &self,
        cond: &PromptEmbedding,
        layout: &TileLayout,
        options: &SampleOptions,
        seed: u64,
        index: u64,
    ) -> Result<Tensor> {
        let c = self.denoiser.config.latent_channels;
        let steps = TimestepSelection::leading(self.schedule, options.steps)?;
        let z = self.initial_noise(&[c, layout.canvas.0, layout.canvas.1], seed, index);
        multidiffusion::multidiffusion_sample(self.eps_fn(cond, options.guidance), &z, layout, &steps, self.schedule)
    }

    /// Progressive 2x upscaling of a base latent; returns each stage's output.
    pub fn upscale(
        &self,
        z_base: &Tensor,
        cond: &PromptEmbedding,
        n_stages: usize,
        tile: (usize, usize),
        config: StageConfig,
        guidance: f64,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        upscaler::progressive_upscale(z_base, n_stages, tile, config, self.schedule, seed, self.eps_fn(cond, guidance))
    }

    /// Generate `n` images at the trained latent resolution for `labels`.
    pub fn generate(&self, labels: &LabelVector, n: usize, latent_hw: (usize, usize), options: &SampleOptions, seed: u64) -> Result<Vec<GrayImage>> {
        let cond = embed_labels(labels);
        let latents = self.sample_latents(&cond, n, latent_hw, options, seed)?;
        self.decode_all(&latents)
    }
}

/// Adapts a [`Generator`] to the benchmark's synthetic-image interface.
pub struct GeneratorSource<'a> {
    pub generator: Generator<'a>,
    pub options: SampleOptions,
    pub image_size: usize,
}

impl crate::bench::SynthSource for GeneratorSource<'_> {
    fn synthesize(&self, label: crate::findings::FindingLabel, n: usize, seed: u64) -> Result<Vec<GrayImage>> {
        let f = self.generator.codec.factor;
        let hw = (self.image_size / f, self.image_size / f);
        self.generator.generate(&LabelVector::single(label), n, hw, &self.options, seed)
    }
}
