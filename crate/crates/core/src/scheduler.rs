//! Variance schedule, closed-form forward noising, SNR weighting and the
//! sigma-space Euler sampler.
//!
//! Timesteps run 1..=T with `alphas_cum[0] = 1` and `sigmas[0] = 0`, so
//! index 0 is the clean endpoint. The sampler works on `z = x_t / sqrt(ab_t)`
//! where `z = z0 + sigma_t * eps`; the network sees `z / sqrt(1 + sigma^2)`.

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::latent::LatentTensor;

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_GAMMA: f64 = 5.0;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Linear in sqrt(beta).
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// beta_1..beta_T stored at indices 0..T-1.
    pub betas: Vec<f64>,
    /// ab_0..ab_T.
    pub alphas_cum: Vec<f64>,
    /// sigma_0..sigma_T.
    pub sigmas: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let frac = |i: usize| if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
    let betas: Vec<f64> = (0..t)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                (a + (b - a) * frac(i)).powi(2)
            }
        })
        .collect();
    Ok(from_betas(kind, beta_start, beta_end, betas))
}

fn from_betas(kind: ScheduleKind, beta_start: f64, beta_end: f64, betas: Vec<f64>) -> NoiseSchedule {
    let mut alphas_cum = Vec::with_capacity(betas.len() + 1);
    alphas_cum.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_cum.push(acc);
    }
    let sigmas = alphas_cum.iter().map(|a| ((1.0 - a) / a).sqrt()).collect();
    NoiseSchedule { kind, beta_start, beta_end, betas, alphas_cum, sigmas }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(ScheduleKind::ScaledLinear, DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    /// Constant-beta schedule; used by tests and oracles.
    pub fn constant(beta: f64, t: usize) -> Result<Self> {
        make_schedule(ScheduleKind::Linear, t, beta, beta)
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.num_steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[self.num_steps()]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
pub fn forward_noise(z0: &LatentTensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentTensor> {
    let zt = forward_noise_tensor(z0.values(), t, eps, schedule)?;
    LatentTensor::new(zt, z0.scale_factor())
}

pub fn forward_noise_tensor(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("noise {:?} vs latent {:?}", eps.shape(), z0.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// One transition of q(z_t | z_{t-1}) = N(sqrt(1 - beta_t) z_{t-1}, beta_t I).
pub fn forward_step(z_prev: f64, t: usize, eps: f64, schedule: &NoiseSchedule) -> f64 {
    let b = schedule.beta(t);
    (1.0 - b).sqrt() * z_prev + b.sqrt() * eps
}

pub fn snr(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(ab / (1.0 - ab))
}

/// min(SNR, gamma) / SNR, the epsilon-prediction form.
pub fn minsnr_weight(t: usize, gamma: f64, schedule: &NoiseSchedule) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    Ok(minsnr_from_snr(snr(t, schedule)?, gamma))
}

pub fn minsnr_from_snr(snr: f64, gamma: f64) -> f64 {
    snr.min(gamma) / snr
}

/// Descending timesteps visited by the sampler; sampling ends at sigma = 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSelection {
    pub inference_steps: usize,
    pub indices: Vec<usize>,
}

impl TimestepSelection {
    /// Evenly spaced from T: t_i = T - round(i T / N), i = 0..N.
    pub fn leading(schedule: &NoiseSchedule, n: usize) -> Result<Self> {
        Self::starting_at(schedule, schedule.num_steps(), n)
    }

    /// Evenly spaced ladder starting at `t_start` instead of T.
    pub fn starting_at(schedule: &NoiseSchedule, t_start: usize, n: usize) -> Result<Self> {
        schedule.check_t(t_start)?;
        if n == 0 || n > t_start {
            return Err(invalid(format!("need 1 <= steps <= {t_start}, got {n}")));
        }
        let indices = (0..n)
            .map(|i| t_start - ((i * t_start) as f64 / n as f64).round() as usize)
            .collect::<Vec<_>>();
        debug_assert!(indices.windows(2).all(|w| w[0] > w[1]));
        Ok(Self { inference_steps: n, indices })
    }

    /// sigma(t_0), ..., sigma(t_{N-1}), 0.
    pub fn sigma_ladder(&self, schedule: &NoiseSchedule) -> Vec<f64> {
        let mut s: Vec<f64> = self.indices.iter().map(|&t| schedule.sigma(t)).collect();
        s.push(0.0);
        s
    }
}

/// Network input for a sigma-space latent.
pub fn model_input(z: &Tensor, sigma: f64) -> Tensor {
    z.scale(1.0 / (1.0 + sigma * sigma).sqrt())
}

/// One Euler update given the predicted noise; returns (next z, x0 estimate).
/// With `sigma_next == 0` the next z is the x0 estimate itself.
pub fn euler_update(z: &Tensor, eps: &Tensor, sigma: f64, sigma_next: f64) -> (Tensor, Tensor) {
    let x0 = z.zip_map(eps, |zv, e| zv - sigma * e);
    if sigma_next == 0.0 {
        return (x0.clone(), x0);
    }
    // d = (z - x0) / sigma = eps
    let dt = sigma_next - sigma;
    (z.zip_map(eps, |zv, e| zv + dt * e), x0)
}

/// Draw z_T = sigma_max * eps.
pub fn initial_latent(shape: &[usize], schedule: &NoiseSchedule, seed: u64) -> Tensor {
    let mut rng = crate::seed::rng_for(seed, "sampler/initial");
    Tensor::randn(shape, schedule.sigma_max(), &mut rng)
}

/// Sigma-space Euler sampling from `z_start`, which must already carry noise
/// at sigma(t_0). `eps_fn(model_input, t)` returns the predicted noise;
/// conditioning is captured by the closure.
pub fn euler_sample<F>(mut eps_fn: F, z_start: &Tensor, steps: &TimestepSelection, schedule: &NoiseSchedule) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let sigmas = steps.sigma_ladder(schedule);
    let mut z = z_start.clone();
    for (i, &t) in steps.indices.iter().enumerate() {
        let eps = eps_fn(&model_input(&z, sigmas[i]), t)?;
        if eps.shape() != z.shape() {
            return Err(Error::Shape(format!("noise prediction {:?} for latent {:?}", eps.shape(), z.shape())));
        }
        let (next, _) = euler_update(&z, &eps, sigmas[i], sigmas[i + 1]);
        if !next.all_finite() {
            return Err(Error::NonFinite { step: i, detail: format!("sampler state at t={t}") });
        }
        z = next;
    }
    Ok(z)
}

/// Convenience wrapper over [`euler_sample`] for `LatentTensor`s.
pub fn euler_sample_latent<F>(eps_fn: F, z_t: &LatentTensor, steps: &TimestepSelection, schedule: &NoiseSchedule) -> Result<LatentTensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let out = euler_sample(eps_fn, z_t.values(), steps, schedule)?;
    LatentTensor::new(out, z_t.scale_factor())
}
