use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::latent::{LatentVideo, LATENT_CHANNELS};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DDIM_STEPS: usize = 50;
pub const DEFAULT_ETA: f64 = 1.0;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Latent `(height, width)`.
    pub latent_size: (usize, usize),
    /// Worker threads for per-frame work; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: DEFAULT_DDIM_STEPS,
            eta: DEFAULT_ETA,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            latent_size: (16, 16),
            workers: None,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > sched.steps() {
            return Err(Error::validation(
                "ddim_steps",
                format!("must lie in [1, {}], got {}", sched.steps(), self.ddim_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::validation("eta", format!("must lie in [0, 1], got {}", self.eta)));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::validation("guidance_scale", "must be finite"));
        }
        let (h, w) = self.latent_size;
        if h == 0 || w == 0 {
            return Err(Error::validation("latent_size", "dimensions must be positive"));
        }
        if self.workers == Some(0) {
            return Err(Error::validation("workers", "must be at least 1"));
        }
        Ok(())
    }
}

/// `n` timesteps spread uniformly over `[0, steps − 1]`, both ends included,
/// in sampling (descending) order.
pub fn ddim_timesteps(n: usize, steps: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![steps - 1];
    }
    let last = (steps - 1) as f64;
    (0..n)
        .rev()
        .map(|i| (i as f64 * last / (n - 1) as f64).round() as usize)
        .collect()
}

fn map2(a: &LatentVideo, b: &LatentVideo, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<LatentVideo> {
    a.same_shape(b, what)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x as f64, y as f64) as f32)
        .collect();
    LatentVideo::new(Tensor::new(a.tensor().shape().to_vec(), data)?)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn add_noise(x0: &LatentVideo, noise: &LatentVideo, t: usize, sched: &NoiseSchedule) -> Result<LatentVideo> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    map2(x0, noise, "add_noise", |x, n| a * x + b * n)
}

/// One DDIM update from `t` to `t_prev` (`None` for the final step, where
/// `ᾱ_prev = 1`). `z` is required whenever σ > 0.
pub fn ddim_step(
    x_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    sched: &NoiseSchedule,
    z: Option<&LatentVideo>,
) -> Result<LatentVideo> {
    x_t.same_shape(eps_hat, "ddim_step")?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) if p >= t => {
            return Err(Error::validation(
                "t_prev",
                format!("must be below t = {t}, got {p}"),
            ))
        }
        Some(p) => sched.alpha_bar(p)?,
        None => 1.0,
    };
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::validation("eta", format!("must be non-negative, got {eta}")));
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let mut radicand = 1.0 - ab_prev - sigma * sigma;
    if radicand < 0.0 {
        if radicand > -1e-12 {
            radicand = 0.0;
        } else {
            return Err(Error::NumericalDomain(format!(
                "1 - alpha_bar_prev - sigma^2 = {radicand} < 0 (eta = {eta})"
            )));
        }
    }
    let dir = radicand.sqrt();
    let (sa_t, sb_t, sa_prev) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());
    let noise = if sigma > 0.0 {
        let z = z.ok_or_else(|| {
            Error::validation("z", format!("sigma = {sigma} > 0 requires a noise sample"))
        })?;
        x_t.same_shape(z, "ddim_step noise")?;
        Some(z.data())
    } else {
        None
    };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - sb_t * e) / sa_t;
            let mut v = sa_prev * x0 + dir * e;
            if let Some(z) = noise {
                v += sigma * z[i] as f64;
            }
            v as f32
        })
        .collect();
    LatentVideo::new(Tensor::new(x_t.tensor().shape().to_vec(), data)?)
}

/// `x0_pred = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(x_t: &LatentVideo, eps_hat: &LatentVideo, t: usize, sched: &NoiseSchedule) -> Result<LatentVideo> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    map2(x_t, eps_hat, "predict_x0", |x, e| (x - b * e) / a)
}

/// `ε_u + s·(ε_c − ε_u)`; `s = 1` returns `ε_c` exactly.
pub fn cfg_combine(eps_cond: &LatentVideo, eps_uncond: &LatentVideo, scale: f64) -> Result<LatentVideo> {
    eps_cond.same_shape(eps_uncond, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    map2(eps_cond, eps_uncond, "cfg_combine", |c, u| u + scale * (c - u))
}

/// Counter-based Gaussian source: each `(chunk, step)` pair owns an
/// independent ChaCha stream under the seed's key, so draws do not depend on
/// execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

/// Step code used for the initial latents of a chunk.
pub const INITIAL_NOISE_STEP: u32 = u32::MAX;

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, chunk: u32, step: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((chunk as u64) << 32) | step as u64);
        rng
    }

    pub fn gaussian(&self, chunk: u32, step: u32, frames: usize, height: usize, width: usize) -> LatentVideo {
        let mut rng = self.rng(chunk, step);
        let n = frames * LATENT_CHANNELS * height * width;
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        LatentVideo::new(Tensor::from_parts(vec![frames, LATENT_CHANNELS, height, width], data))
            .expect("positive latent dims")
    }
}
