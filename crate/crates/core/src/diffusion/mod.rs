//! Noise schedule, DDIM sampling with classifier-free guidance, the toy
//! denoiser, and single-pass and chunked generation.

mod denoiser;
mod generate;
mod latent;
mod preview;
mod sampler;
mod schedule;

pub use denoiser::{
    predicted_clean, Branch, NoisePredictor, RefPlacement, ToyConditioning, ToyDenoiser,
    ToyDenoiserConfig, TrueNoiseOracle,
};
pub use generate::{chunk_references, generate, generate_autoregressive, sample_chunk, AutoregressiveOptions};
pub use latent::{LatentVideo, LATENT_CHANNELS};
pub use preview::{preview_pgm, preview_sheet};
pub use sampler::{
    add_noise, cfg_combine, ddim_step, ddim_timesteps, predict_x0, NoiseStream, SamplerConfig,
    DEFAULT_DDIM_STEPS, DEFAULT_ETA, DEFAULT_GUIDANCE_SCALE, INITIAL_NOISE_STEP,
};
pub use schedule::{
    linear_beta_schedule, BetaSpacing, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_TRAIN_STEPS,
};

/// Conditional ε̂ of the toy denoiser.
pub fn denoise(
    x_t: &LatentVideo,
    t: usize,
    plan: &crate::plan::PromptPlan,
    refs: Option<&[crate::encoders::RefContext]>,
    model: &ToyDenoiser,
) -> crate::Result<LatentVideo> {
    model.denoise(x_t, t, plan, refs)
}
