//! Progressive 2x latent upscaling: upsample, re-noise part way, then denoise
//! with per-step proposals that average a tiled path and a dilated path,
//! blended after every step with the re-noised upsample (skip residual).
//!
//! All updates live in sigma space, where the noised upsample at level sigma
//! is `u + sigma * eps`. The residual weight after step i (i = 1..N) is
//! `c1(i) = ((1 + cos(pi i / N)) / 2)^kappa`, which reaches 0 at the last step.

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imageio::GrayImage;
use crate::multidiffusion::{self, TileLayout};
use crate::scheduler::{self, NoiseSchedule, TimestepSelection};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Double the spatial dims of a (c, h, w) tensor.
pub fn upsample_latent(z: &Tensor, mode: UpsampleMode) -> Tensor {
    match mode {
        UpsampleMode::Bilinear => autograd::upsample_bilinear2(z),
        UpsampleMode::Nearest => {
            let (c, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let src = z.data();
            let mut out = Vec::with_capacity(4 * src.len());
            for ch in 0..c {
                for y in 0..2 * h {
                    out.extend((0..2 * w).map(|x| src[(ch * h + y / 2) * w + x / 2]));
                }
            }
            Tensor::new(vec![c, 2 * h, 2 * w], out)
        }
    }
}

/// The s^2 strided sub-grids `z[:, a::s, b::s]` of a (c, H, W) latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilatedGrid {
    pub factor: usize,
    pub height: usize,
    pub width: usize,
}

impl DilatedGrid {
    pub fn new(factor: usize, height: usize, width: usize) -> Result<Self> {
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(invalid(format!("dilation {factor} does not divide {height}x{width}")));
        }
        Ok(Self { factor, height, width })
    }

    pub fn sub_shape(&self) -> (usize, usize) {
        (self.height / self.factor, self.width / self.factor)
    }

    /// Sub-grids in (a, b) row-major order.
    pub fn gather(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        if z.shape().len() != 3 || z.shape()[1] != self.height || z.shape()[2] != self.width {
            return Err(Error::Shape(format!("latent {:?} vs grid {}x{}", z.shape(), self.height, self.width)));
        }
        let (c, s) = (z.shape()[0], self.factor);
        let (sh, sw) = self.sub_shape();
        let mut out = Vec::with_capacity(s * s);
        for a in 0..s {
            for b in 0..s {
                let mut d = Vec::with_capacity(c * sh * sw);
                for ch in 0..c {
                    for y in 0..sh {
                        for x in 0..sw {
                            d.push(z.data()[(ch * self.height + y * s + a) * self.width + x * s + b]);
                        }
                    }
                }
                out.push(Tensor::new(vec![c, sh, sw], d));
            }
        }
        Ok(out)
    }

    pub fn scatter(&self, subs: &[Tensor]) -> Result<Tensor> {
        let s = self.factor;
        if subs.len() != s * s {
            return Err(Error::Shape(format!("{} sub-grids for dilation {s}", subs.len())));
        }
        let c = subs[0].shape()[0];
        let (sh, sw) = self.sub_shape();
        let mut out = vec![0.0; c * self.height * self.width];
        for a in 0..s {
            for b in 0..s {
                let sub = &subs[a * s + b];
                if sub.shape() != [c, sh, sw] {
                    return Err(Error::Shape(format!("sub-grid {:?}, expected ({c}, {sh}, {sw})", sub.shape())));
                }
                for ch in 0..c {
                    for y in 0..sh {
                        for x in 0..sw {
                            out[(ch * self.height + y * s + a) * self.width + x * s + b] = sub.data()[(ch * sh + y) * sw + x];
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![c, self.height, self.width], out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualDecay {
    /// ((1 + cos(pi i / N)) / 2)^kappa
    Cosine { kappa: f64 },
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Re-noise depth as a fraction of T.
    pub tau_start: f64,
    pub steps: usize,
    pub decay: ResidualDecay,
    /// Weight of the tiled proposal; the dilated path gets the rest.
    pub tiled_weight: f64,
    pub mode: UpsampleMode,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            tau_start: 0.6,
            steps: 30,
            decay: ResidualDecay::Cosine { kappa: 1.0 },
            tiled_weight: 0.5,
            mode: UpsampleMode::Bilinear,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_start) {
            return Err(invalid(format!("tau_start must lie in [0, 1], got {}", self.tau_start)));
        }
        if !(0.0..=1.0).contains(&self.tiled_weight) {
            return Err(invalid("tiled weight must lie in [0, 1]"));
        }
        match self.decay {
            ResidualDecay::Cosine { kappa } if !(kappa > 0.0) => Err(invalid("kappa must be positive")),
            ResidualDecay::Constant(c) if !(0.0..=1.0).contains(&c) => Err(invalid("constant c1 must lie in [0, 1]")),
            _ => Ok(()),
        }
    }

    /// c1(1..=n).
    pub fn residual_weights(&self, n: usize) -> Vec<f64> {
        (1..=n)
            .map(|i| match self.decay {
                ResidualDecay::Cosine { kappa } => {
                    let v = (1.0 + (std::f64::consts::PI * i as f64 / n as f64).cos()) / 2.0;
                    v.max(0.0).powf(kappa)
                }
                ResidualDecay::Constant(c) => c,
            })
            .collect()
    }
}

/// Per-stage structure: tile layout on the doubled canvas and dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct UpscaleStage {
    pub config: StageConfig,
    pub layout: TileLayout,
    pub grid: DilatedGrid,
}

impl UpscaleStage {
    /// Stage for an input of (h, w) with denoiser tile size `tile`; the
    /// dilation makes sub-grids tile sized.
    pub fn for_input(input_hw: (usize, usize), tile: (usize, usize), config: StageConfig) -> Result<Self> {
        config.validate()?;
        let canvas = (2 * input_hw.0, 2 * input_hw.1);
        let tile = (tile.0.min(canvas.0), tile.1.min(canvas.1));
        let layout = multidiffusion::plan_tiles(canvas, tile, multidiffusion::default_stride(tile))?;
        let s = (canvas.0 / tile.0).min(canvas.1 / tile.1).max(1);
        let grid = DilatedGrid::new(s, canvas.0, canvas.1)?;
        Ok(Self { config, layout, grid })
    }
}

fn dilated_proposal<F>(z: &Tensor, grid: &DilatedGrid, t: usize, sigma: f64, sigma_next: f64, eps_fn: &mut F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let subs = grid.gather(z)?;
    let inputs: Vec<Tensor> = subs.iter().map(|s| scheduler::model_input(s, sigma)).collect();
    let eps = eps_fn(&Tensor::stack(&inputs), t)?;
    let next: Vec<Tensor> =
        subs.iter().enumerate().map(|(k, s)| scheduler::euler_update(s, &eps.index0(k), sigma, sigma_next).0).collect();
    grid.scatter(&next)
}

/// Noise used both for the initial re-noise and the skip residual.
pub fn renoise_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seed::rng_for(seed, "upscale/renoise"))
}

/// One upsample-diffuse-denoise stage on a (c, h, w) latent.
pub fn upscale_stage<F>(z_in: &Tensor, stage: &UpscaleStage, schedule: &NoiseSchedule, seed: u64, mut eps_fn: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let cfg = &stage.config;
    cfg.validate()?;
    let u = upsample_latent(z_in, cfg.mode);
    if u.shape()[1..] != [stage.layout.canvas.0, stage.layout.canvas.1] {
        return Err(Error::Shape(format!("upsampled latent {:?} vs stage canvas {:?}", u.shape(), stage.layout.canvas)));
    }
    let t_start = (cfg.tau_start * schedule.num_steps() as f64).round() as usize;
    if t_start == 0 || cfg.steps == 0 {
        return Ok(u);
    }
    let steps = TimestepSelection::starting_at(schedule, t_start, cfg.steps.min(t_start))?;
    let sigmas = steps.sigma_ladder(schedule);
    let c1 = cfg.residual_weights(steps.indices.len());
    let eps = renoise_noise(u.shape(), seed);
    let s0 = sigmas[0];
    let mut z = u.zip_map(&eps, |a, e| a + s0 * e);
    for (i, &t) in steps.indices.iter().enumerate() {
        let (s, sn) = (sigmas[i], sigmas[i + 1]);
        let tiled = multidiffusion::fused_denoise_step(&z, &stage.layout, t, s, sn, &mut eps_fn)?;
        let dilated = dilated_proposal(&z, &stage.grid, t, s, sn, &mut eps_fn)?;
        let w = cfg.tiled_weight;
        let proposal = tiled.zip_map(&dilated, |a, b| w * a + (1.0 - w) * b);
        // skip residual towards the re-noised upsample at the new level
        let c = c1[i];
        let mut next = proposal.clone();
        for ((o, &p), (&uu, &e)) in next.data_mut().iter_mut().zip(proposal.data()).zip(u.data().iter().zip(eps.data())) {
            *o = c * (uu + sn * e) + (1.0 - c) * p;
        }
        if !next.all_finite() {
            return Err(Error::NonFinite { step: i, detail: format!("upscale state at t={t}") });
        }
        z = next;
    }
    Ok(z)
}

/// Apply `n_stages` stages; returns every stage output, last is the final.
pub fn progressive_upscale<F>(
    z_base: &Tensor,
    n_stages: usize,
    tile: (usize, usize),
    config: StageConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    mut eps_fn: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if n_stages == 0 {
        return Err(invalid("need at least one upscale stage"));
    }
    let mut outs: Vec<Tensor> = Vec::with_capacity(n_stages);
    let mut z = z_base.clone();
    for k in 0..n_stages {
        let stage = UpscaleStage::for_input((z.shape()[1], z.shape()[2]), tile, config)?;
        z = upscale_stage(&z, &stage, schedule, seed::derive_index(seed, "upscale/stage", k as u64), &mut eps_fn)?;
        outs.push(z.clone());
    }
    Ok(outs)
}

/// Bilinear 2x upsampling of a grayscale image.
pub fn upsample_image(img: &GrayImage) -> GrayImage {
    let u = autograd::upsample_bilinear2(&Tensor::new(vec![img.height, img.width], img.pixels.clone()));
    GrayImage { width: 2 * img.width, height: 2 * img.height, pixels: u.into_data() }
}

/// Normalised cross-correlation of two equal-length signals.
pub fn ncc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("ncc of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(if saa == sbb { 1.0 } else { 0.0 });
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_examples() {
        let c = Tensor::full(&[2, 3, 5], 0.7);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let u = upsample_latent(&c, mode);
            assert_eq!(u.shape(), &[2, 6, 10]);
            assert!(u.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        }
        let z = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let n = upsample_latent(&z, UpsampleMode::Nearest);
        assert_eq!(n.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let b = upsample_latent(&z, UpsampleMode::Bilinear);
        assert_eq!(b.data()[0], 1.0);
        assert!((b.data()[1] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn residual_weights_decay_to_zero() {
        let w = StageConfig::default().residual_weights(10);
        assert_eq!(w.len(), 10);
        assert!(w.windows(2).all(|p| p[0] >= p[1]));
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(w[9].abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(StageConfig { tau_start: 1.5, ..Default::default() }.validate().is_err());
        assert!(StageConfig { decay: ResidualDecay::Constant(2.0), ..Default::default() }.validate().is_err());
        assert!(StageConfig { decay: ResidualDecay::Cosine { kappa: 0.0 }, ..Default::default() }.validate().is_err());
        assert!(DilatedGrid::new(3, 16, 16).is_err());
    }

    #[test]
    fn ncc_examples() {
        assert!((ncc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((ncc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(ncc(&[1.0], &[1.0, 2.0]).is_err());
    }
}
