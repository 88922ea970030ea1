//! Latent diffusion for high-resolution synthetic chest radiographs, at desk
//! scale: procedural phantom data, a convolutional latent codec, a
//! conditional U-shaped denoiser with LoRA adapters, Euler sampling, tiled
//! (MultiDiffusion) generation above the trained resolution, progressive
//! upsample-diffuse-denoise upscaling, and FID / Vendi / AUROC evaluation.

pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod findings;
pub mod imageio;
pub mod latent;
pub mod lora;
pub mod metrics;
pub mod multidiffusion;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod scheduler;
pub mod seed;
pub mod upscaler;

pub use autograd;
pub use error::{Error, Result};

/// Run `f` on a dedicated pool of `workers` threads (0 = rayon default).
/// Parallel sections collect in a fixed order, so results do not depend on
/// the worker count.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}
