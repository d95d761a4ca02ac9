use std::sync::Arc;

use super::denoiser::{Branch, NoisePredictor, ToyDenoiser};
use super::latent::LatentVideo;
use super::sampler::{cfg_combine, ddim_step, ddim_timesteps, NoiseStream, SamplerConfig, INITIAL_NOISE_STEP};
use super::schedule::NoiseSchedule;
use crate::encoders::{RefContext, ReferenceEncoder, REF_FRAMES};
use crate::error::{Error, Result};
use crate::plan::{rasterize_mask, PromptPlan, FRAME_QUANTUM};

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::validation("workers", e.to_string()))?
            .install(f),
    }
}

/// Runs the sampling loop for one chunk. `chunk` selects the noise streams.
pub fn sample_chunk<P: NoisePredictor>(
    plan: &PromptPlan,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    model: &P,
    refs: Option<&[RefContext]>,
    chunk: u32,
) -> Result<LatentVideo> {
    cfg.validate(sched)?;
    plan.validate()?;
    let (h, w) = cfg.latent_size;
    let stream = NoiseStream::new(cfg.seed);
    let cond = model.prepare(plan, refs, Branch::Conditional, cfg.latent_size)?;
    let guided = cfg.guidance_scale != 1.0;
    let uncond = if guided {
        Some(model.prepare(plan, refs, Branch::Unconditional, cfg.latent_size)?)
    } else {
        None
    };
    let mut x = stream.gaussian(chunk, INITIAL_NOISE_STEP, plan.total_frames, h, w);
    let ts = ddim_timesteps(cfg.ddim_steps, sched.steps());
    for (i, &t) in ts.iter().enumerate() {
        let eps_c = model.predict(&x, t, &cond)?;
        let eps = match &uncond {
            Some(u) => cfg_combine(&eps_c, &model.predict(&x, t, u)?, cfg.guidance_scale)?,
            None => eps_c,
        };
        let t_prev = ts.get(i + 1).copied();
        let z = (cfg.eta > 0.0 && t_prev.is_some())
            .then(|| stream.gaussian(chunk, t as u32, plan.total_frames, h, w));
        x = ddim_step(&x, &eps, t, t_prev, cfg.eta, sched, z.as_ref())?;
    }
    Ok(x)
}

/// Samples a whole plan in one pass from seeded Gaussian latents.
pub fn generate<P: NoisePredictor>(
    plan: &PromptPlan,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    model: &P,
    refs: Option<&[RefContext]>,
) -> Result<LatentVideo> {
    with_workers(cfg.workers, || sample_chunk(plan, cfg, sched, model, refs, 0))
}

/// Options for chunked generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoregressiveOptions {
    pub chunk_frames: usize,
    /// Condition each chunk on the previous one through reference attention.
    pub use_refs: bool,
}

impl AutoregressiveOptions {
    pub fn new(chunk_frames: usize) -> Self {
        Self {
            chunk_frames,
            use_refs: true,
        }
    }
}

/// Per-object reference contexts from the last `l` frames of `previous`.
///
/// The frames are encoded once; each sub-object of the segment that governs
/// the last previous frame gets a context restricted to its box.
pub fn chunk_references(
    previous: &LatentVideo,
    previous_plan: &PromptPlan,
    global_start: usize,
    encoder: &ReferenceEncoder,
) -> Result<Vec<RefContext>> {
    let n = previous.frames();
    if n < REF_FRAMES {
        return Err(Error::validation(
            "chunk_frames",
            format!("need at least {REF_FRAMES} frames for references, got {n}"),
        ));
    }
    let frames = previous.narrow(n - REF_FRAMES, REF_FRAMES)?;
    let x_ref = Arc::new(encoder.encode(frames.tensor())?);
    let (h, w) = previous.frame_shape();
    let seg = previous_plan.segment_for_frame(n - 1)?;
    let span = (global_start + n - REF_FRAMES, REF_FRAMES);
    seg.sub_objects
        .iter()
        .map(|obj| {
            RefContext::new(
                Arc::clone(&x_ref),
                rasterize_mask(&obj.bbox, h, w),
                span,
                Some(obj.prompt.clone()),
            )
        })
        .collect()
}

/// Generates consecutive non-overlapping chunks; every chunk after the first
/// is conditioned on the final frames of its predecessor.
pub fn generate_autoregressive(
    plan: &PromptPlan,
    opts: AutoregressiveOptions,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    model: &ToyDenoiser,
) -> Result<LatentVideo> {
    let chunk = opts.chunk_frames;
    if chunk == 0 || chunk % FRAME_QUANTUM != 0 {
        return Err(Error::validation(
            "chunk_frames",
            format!("must be a positive multiple of {FRAME_QUANTUM}, got {chunk}"),
        ));
    }
    if plan.total_frames % chunk != 0 {
        return Err(Error::validation(
            "chunk_frames",
            format!(
                "{} total frames is not a multiple of {chunk}",
                plan.total_frames
            ),
        ));
    }
    with_workers(cfg.workers, || {
        let mut chunks: Vec<LatentVideo> = Vec::new();
        let mut prev_plan: Option<PromptPlan> = None;
        for c in 0..plan.total_frames / chunk {
            let sub = plan.slice(c * chunk, chunk)?;
            let refs = match (&prev_plan, chunks.last()) {
                (Some(pp), Some(prev)) if opts.use_refs => Some(chunk_references(
                    prev,
                    pp,
                    (c - 1) * chunk,
                    model.reference_encoder(),
                )?),
                _ => None,
            };
            chunks.push(sample_chunk(&sub, cfg, sched, model, refs.as_deref(), c as u32)?);
            prev_plan = Some(sub);
        }
        LatentVideo::concat(&chunks)
    })
}
