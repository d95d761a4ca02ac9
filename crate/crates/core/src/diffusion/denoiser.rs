use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::latent::{LatentVideo, LATENT_CHANNELS};
use super::sampler::predict_x0;
use super::schedule::NoiseSchedule;
use crate::attention::{
    attend_reference, cross_attention, AttentionLayer, BlendMode, PreparedPlan,
    ProjectedReference,
};
use crate::encoders::{Activation, RefContext, ReferenceEncoder, TextEmbedding, TextEncoder, REF_OUT};
use crate::error::{Error, Result};
use crate::plan::{rasterize_mask, PromptPlan, RegionMask};
use crate::tensor::{conv2d, matmul, seeded_normal, silu, Tensor};

/// Which side of classifier-free guidance a conditioning serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// An ε-predictor driven by the sampler.
pub trait NoisePredictor: Sync {
    type Conditioning: Sync;

    fn prepare(
        &self,
        plan: &PromptPlan,
        refs: Option<&[RefContext]>,
        branch: Branch,
        latent_size: (usize, usize),
    ) -> Result<Self::Conditioning>;

    fn predict(&self, x_t: &LatentVideo, t: usize, cond: &Self::Conditioning) -> Result<LatentVideo>;
}

/// Where the reference-attention residual sits relative to cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefPlacement {
    Before,
    #[default]
    After,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiserConfig {
    pub seed: u64,
    pub hidden: usize,
    pub text_dim: usize,
    pub vocab_seed: u64,
    pub heads: usize,
    pub blend: BlendMode,
    pub placement: RefPlacement,
    pub encoder_activation: Activation,
    /// Strength of the reference readout per resolution.
    pub ref_gain: f32,
    /// Gain of the positional code on reference queries and keys.
    pub positional_gain: f32,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: 32,
            text_dim: 64,
            vocab_seed: 0,
            heads: 1,
            blend: BlendMode::Literal,
            placement: RefPlacement::After,
            encoder_activation: Activation::Silu,
            ref_gain: 0.5,
            positional_gain: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    k1: Tensor,
    b1: Tensor,
    k2: Tensor,
    b2: Tensor,
}

impl ResBlock {
    fn seeded(rng: &mut ChaCha8Rng, c: usize) -> Self {
        let std = 1.0 / ((c * 9) as f64).sqrt();
        Self {
            k1: seeded_normal(rng, &[c, c, 3, 3], std),
            b1: seeded_normal(rng, &[c], 0.01),
            k2: seeded_normal(rng, &[c, c, 3, 3], 0.5 * std),
            b2: seeded_normal(rng, &[c], 0.01),
        }
    }

    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let a = conv2d(h, &self.k1, 1, &self.b1)?.map(silu);
        h.add(&conv2d(&a, &self.k2, 1, &self.b2)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    xattn: AttentionLayer,
    w_o_text: Tensor,
    refattn: AttentionLayer,
    w_o_ref: Tensor,
}

/// Seeded two-resolution ε-predictor hosting the compositional
/// cross-attention and reference attention.
///
/// Per frame: `conv_in → +temb → SiLU → res_hi`, then `avgpool → res_lo →
/// attention_lo`, `attention_hi` on the full-resolution stream, sum with the
/// upsampled low stream, and a pointwise readout `net`. The returned noise is
/// `√(1−ᾱ_t)·x_t + √ᾱ_t·net`, which keeps `x0_pred = √ᾱ_t·x_t − √(1−ᾱ_t)·net`
/// bounded at every step. Frames are independent apart from reference
/// conditioning.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    conv_in_k: Tensor,
    conv_in_b: Tensor,
    hi: Level,
    lo: Level,
    w_out: Tensor,
    text: TextEncoder,
    reference: ReferenceEncoder,
    alpha_bars: Vec<f64>,
}

impl ToyDenoiser {
    pub fn seeded(seed: u64, sched: &NoiseSchedule) -> Result<Self> {
        Self::new(
            ToyDenoiserConfig {
                seed,
                ..ToyDenoiserConfig::default()
            },
            sched,
        )
    }

    pub fn new(config: ToyDenoiserConfig, sched: &NoiseSchedule) -> Result<Self> {
        let c = config.hidden;
        if c < LATENT_CHANNELS {
            return Err(Error::validation(
                "hidden",
                format!("must be at least {LATENT_CHANNELS}, got {c}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let conv_in_k = seeded_normal(&mut rng, &[c, LATENT_CHANNELS, 3, 3], 1.0 / ((LATENT_CHANNELS * 9) as f64).sqrt());
        let conv_in_b = seeded_normal(&mut rng, &[c], 0.01);
        let w_out = seeded_normal(&mut rng, &[c, LATENT_CHANNELS], 1.0 / (c as f64).sqrt());
        let reference = ReferenceEncoder::seeded(config.seed ^ 0x5eed_0f_2ef)
            .with_activation(config.encoder_activation);
        let readout = ridge_readout(&reference, config.seed)?;
        let w_o_ref = reference_output(&w_out, c, config.ref_gain)?;
        let mut level = |tag: u64| -> Result<Level> {
            let xattn = AttentionLayer::seeded(c, config.text_dim, c, config.seed.wrapping_add(tag))
                .with_heads(config.heads)?
                .with_blend_mode(config.blend);
            let seeded = AttentionLayer::seeded(c, REF_OUT, c, config.seed.wrapping_add(tag + 1));
            let (w_q, w_k, _) = seeded.weights();
            let mut w_v = vec![0.0f32; REF_OUT * c];
            for r in 0..REF_OUT {
                w_v[r * c..r * c + LATENT_CHANNELS].copy_from_slice(readout.row(r));
            }
            let refattn = AttentionLayer::from_weights(
                w_q.clone(),
                w_k.clone(),
                Tensor::new([REF_OUT, c], w_v)?,
            )?
            .with_heads(config.heads)?
            .with_positional_gain(config.positional_gain)?;
            Ok(Level {
                res: ResBlock::seeded(&mut rng, c),
                xattn,
                w_o_text: seeded_normal(&mut rng, &[c, c], 0.5 / (c as f64).sqrt()),
                refattn,
                w_o_ref: w_o_ref.clone(),
            })
        };
        let hi = level(101)?;
        let lo = level(202)?;
        Ok(Self {
            text: TextEncoder::new(config.text_dim, config.vocab_seed),
            config,
            conv_in_k,
            conv_in_b,
            hi,
            lo,
            w_out,
            reference,
            alpha_bars: sched.alpha_bars().to_vec(),
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn reference_encoder(&self) -> &ReferenceEncoder {
        &self.reference
    }

    /// Cross-attention layers at `(full, half)` resolution.
    pub fn cross_attention_layers(&self) -> (&AttentionLayer, &AttentionLayer) {
        (&self.hi.xattn, &self.lo.xattn)
    }

    /// Reference-attention layers at `(full, half)` resolution.
    pub fn reference_layers(&self) -> (&AttentionLayer, &AttentionLayer) {
        (&self.hi.refattn, &self.lo.refattn)
    }

    fn time_embedding(&self, t: usize) -> Vec<f32> {
        let c = self.config.hidden;
        (0..c)
            .map(|i| {
                let freq = (-(((i / 2) * 2) as f64) / c as f64 * 10000f64.ln()).exp();
                let a = t as f64 * freq;
                0.5 * if i % 2 == 0 { a.sin() } else { a.cos() } as f32
            })
            .collect()
    }

    /// Conditional ε̂ for `x_t` under `plan`, with optional references.
    pub fn denoise(
        &self,
        x_t: &LatentVideo,
        t: usize,
        plan: &PromptPlan,
        refs: Option<&[RefContext]>,
    ) -> Result<LatentVideo> {
        let cond = self.prepare(plan, refs, Branch::Conditional, x_t.frame_shape())?;
        self.predict(x_t, t, &cond)
    }

    fn forward_frame(&self, x: &Tensor, t: usize, frame: usize, cond: &ToyConditioning) -> Result<Tensor> {
        let (_, h, w) = chw(x);
        let temb = self.time_embedding(t);
        let mut hid = conv2d(x, &self.conv_in_k, 1, &self.conv_in_b)?.into_data();
        for (ch, plane) in hid.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v = silu(*v + temb[ch]);
            }
        }
        let hid = Tensor::from_parts(vec![self.config.hidden, h, w], hid);
        let hid = self.hi.res.forward(&hid)?;
        let lo = self.lo.res.forward(&avg_pool2(&hid))?;
        let lo = self.attention_block(&self.lo, &lo, frame, cond, 1)?;
        let hid = self.attention_block(&self.hi, &hid, frame, cond, 0)?;
        let merged = hid.add(&upsample2(&lo))?;
        // pointwise readout: [c, hw]ᵀ · W_out → [hw, 4] → [4, h, w]
        let net = matmul(&merged.reshape([self.config.hidden, h * w])?.transpose()?, &self.w_out)?
            .transpose()?;
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x
            .data()
            .iter()
            .zip(net.data())
            .map(|(&xv, &nv)| (b * xv as f64 + a * nv as f64) as f32)
            .collect();
        Ok(Tensor::from_parts(vec![LATENT_CHANNELS, h, w], data))
    }

    fn attention_block(
        &self,
        level: &Level,
        hid: &Tensor,
        frame: usize,
        cond: &ToyConditioning,
        li: usize,
    ) -> Result<Tensor> {
        let (c, h, w) = chw(hid);
        let mut tokens = hid.reshape([c, h * w])?.transpose()?;
        match self.config.placement {
            RefPlacement::Before => {
                self.reference_residual(level, &mut tokens, (h, w), frame, cond, li)?;
                self.text_residual(level, &mut tokens, (h, w), frame, cond, li)?;
            }
            RefPlacement::After => {
                self.text_residual(level, &mut tokens, (h, w), frame, cond, li)?;
                self.reference_residual(level, &mut tokens, (h, w), frame, cond, li)?;
            }
        }
        tokens.transpose()?.reshape([c, h, w])
    }

    fn text_residual(
        &self,
        level: &Level,
        tokens: &mut Tensor,
        res: (usize, usize),
        frame: usize,
        cond: &ToyConditioning,
        li: usize,
    ) -> Result<()> {
        let q = level.xattn.query(tokens, res)?;
        let out = match &cond.text[li] {
            TextConditioning::Plan(p) => p.attend_frame(frame, &q, &level.xattn)?,
            TextConditioning::Global(emb) => cross_attention(&q, emb, &level.xattn)?,
        };
        tokens.add_assign(&matmul(&out, &level.w_o_text)?)
    }

    fn reference_residual(
        &self,
        level: &Level,
        tokens: &mut Tensor,
        res: (usize, usize),
        frame: usize,
        cond: &ToyConditioning,
        li: usize,
    ) -> Result<()> {
        let active = &cond.frame_refs[frame];
        if active.is_empty() {
            return Ok(());
        }
        let q = level.refattn.query(tokens, res)?;
        let mut deltas = Vec::with_capacity(active.len());
        for fr in active {
            let mask = &fr.masks[li];
            let out = attend_reference(&q, &cond.projected[li][fr.reference], mask, &level.refattn)?;
            deltas.push((matmul(&out, &level.w_o_ref)?, mask));
        }
        let c = tokens.shape()[1];
        let mut data = std::mem::replace(tokens, Tensor::from_parts(vec![0], vec![])).into_data();
        for (delta, mask) in deltas {
            for (p, &on) in mask.values().iter().enumerate() {
                if on {
                    for (v, d) in data[p * c..(p + 1) * c].iter_mut().zip(delta.row(p)) {
                        *v += d;
                    }
                }
            }
        }
        *tokens = Tensor::from_parts(vec![res.0 * res.1, c], data);
        Ok(())
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn avg_pool2(t: &Tensor) -> Tensor {
    let (c, h, w) = chw(t);
    let (oh, ow) = (h / 2, w / 2);
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let i = 2 * r * w + 2 * col;
                out.push(0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]));
            }
        }
    }
    Tensor::from_parts(vec![c, oh, ow], out)
}

fn upsample2(t: &Tensor) -> Tensor {
    let (c, h, w) = chw(t);
    let d = t.data();
    let mut out = Vec::with_capacity(c * 4 * h * w);
    for ch in 0..c {
        for r in 0..2 * h {
            for col in 0..2 * w {
                out.push(d[ch * h * w + (r / 2) * w + col / 2]);
            }
        }
    }
    Tensor::from_parts(vec![c, 2 * h, 2 * w], out)
}

/// Linear map from reference tokens back to the latent at the token's
/// position, fitted by dual ridge regression on random probe latents.
fn ridge_readout(enc: &ReferenceEncoder, seed: u64) -> Result<Tensor> {
    const PROBE: usize = 10;
    const FRAMES: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let probe = seeded_normal(&mut rng, &[FRAMES, LATENT_CHANNELS, PROBE, PROBE], 1.0);
    let tokens = enc.encode(&probe)?;
    let n = tokens.shape()[0];
    let x = DMatrix::from_fn(n, REF_OUT, |i, j| tokens.row(i)[j] as f64);
    let hw = PROBE * PROBE;
    let y = DMatrix::from_fn(n, LATENT_CHANNELS, |i, c| {
        let (f, p) = (i / hw, i % hw);
        probe.data()[(f * LATENT_CHANNELS + c) * hw + p] as f64
    });
    let mut gram = &x * x.transpose();
    let lambda = 1e-3 * gram.trace() / n as f64;
    for i in 0..n {
        gram[(i, i)] += lambda;
    }
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::NumericalDomain("reference readout system is singular".into()))?
        .solve(&y);
    let d = x.transpose() * coef;
    Tensor::new(
        [REF_OUT, LATENT_CHANNELS],
        (0..REF_OUT)
            .flat_map(|r| (0..LATENT_CHANNELS).map(move |c| (r, c)))
            .map(|(r, c)| d[(r, c)] as f32)
            .collect(),
    )
}

/// `[d, c]` output projection whose first four rows are `−gain·pinv(W_out)`,
/// so a reference value `r` in the first four channels moves `net` by
/// `−gain·r` and `x0_pred` toward `+r`.
fn reference_output(w_out: &Tensor, c: usize, gain: f32) -> Result<Tensor> {
    let w = DMatrix::from_fn(c, LATENT_CHANNELS, |i, j| w_out.row(i)[j] as f64);
    let pinv = w
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::NumericalDomain(e.to_string()))?;
    let mut data = vec![0.0f32; c * c];
    for r in 0..LATENT_CHANNELS {
        for col in 0..c {
            data[r * c + col] = -(gain as f64 * pinv[(r, col)]) as f32;
        }
    }
    Tensor::new([c, c], data)
}

#[derive(Debug, Clone)]
enum TextConditioning {
    Plan(PreparedPlan),
    Global(TextEmbedding),
}

#[derive(Debug, Clone)]
struct FrameRef {
    reference: usize,
    masks: [RegionMask; 2],
}

/// Everything [`ToyDenoiser::predict`] needs that does not change across
/// timesteps: prepared text conditioning and projected reference keys and
/// values at both resolutions, plus per-frame reference masks.
#[derive(Debug, Clone)]
pub struct ToyConditioning {
    text: [TextConditioning; 2],
    projected: [Vec<ProjectedReference>; 2],
    frame_refs: Vec<Vec<FrameRef>>,
    latent_size: (usize, usize),
}

impl ToyConditioning {
    pub fn frames(&self) -> usize {
        self.frame_refs.len()
    }

    /// Union (at full resolution) of every cell reference attention may touch
    /// in `frame`.
    pub fn reference_region(&self, frame: usize) -> RegionMask {
        let (h, w) = self.latent_size;
        let mut region = RegionMask::filled(h, w, false);
        for fr in &self.frame_refs[frame] {
            let lo = &fr.masks[1];
            let up: Vec<bool> = (0..h * w)
                .map(|p| lo.get((p / w) / 2, (p % w) / 2))
                .collect();
            region = region
                .union(&fr.masks[0])
                .and_then(|m| m.union(&RegionMask::new(h, w, up)?))
                .expect("matching resolutions");
        }
        region
    }
}

impl NoisePredictor for ToyDenoiser {
    type Conditioning = ToyConditioning;

    fn prepare(
        &self,
        plan: &PromptPlan,
        refs: Option<&[RefContext]>,
        branch: Branch,
        latent_size: (usize, usize),
    ) -> Result<ToyConditioning> {
        let (h, w) = latent_size;
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::validation(
                "latent_size",
                format!("toy denoiser needs even dimensions >= 2, got {h}x{w}"),
            ));
        }
        let res = [(h, w), (h / 2, w / 2)];
        let text = match branch {
            Branch::Conditional => [
                TextConditioning::Plan(PreparedPlan::new(plan, &self.text, res[0])?),
                TextConditioning::Plan(PreparedPlan::new(plan, &self.text, res[1])?),
            ],
            Branch::Unconditional => {
                let u = self.text.unconditional();
                [TextConditioning::Global(u.clone()), TextConditioning::Global(u)]
            }
        };
        let refs = refs.unwrap_or(&[]);
        let mut projected = [Vec::with_capacity(refs.len()), Vec::with_capacity(refs.len())];
        for ctx in refs {
            projected[0].push(self.hi.refattn.project_reference(ctx)?);
            projected[1].push(self.lo.refattn.project_reference(ctx)?);
        }
        let mut frame_refs = Vec::with_capacity(plan.total_frames);
        for f in 0..plan.total_frames {
            let seg = plan.segment_for_frame(f)?;
            let mut active = Vec::new();
            for (k, ctx) in refs.iter().enumerate() {
                let masks = match ctx.label() {
                    None => [
                        RegionMask::filled(res[0].0, res[0].1, true),
                        RegionMask::filled(res[1].0, res[1].1, true),
                    ],
                    Some(label) => match seg.object(label) {
                        Some(obj) => [
                            rasterize_mask(&obj.bbox, res[0].0, res[0].1),
                            rasterize_mask(&obj.bbox, res[1].0, res[1].1),
                        ],
                        None => continue,
                    },
                };
                active.push(FrameRef { reference: k, masks });
            }
            frame_refs.push(active);
        }
        Ok(ToyConditioning {
            text,
            projected,
            frame_refs,
            latent_size,
        })
    }

    fn predict(&self, x_t: &LatentVideo, t: usize, cond: &ToyConditioning) -> Result<LatentVideo> {
        if t >= self.alpha_bars.len() {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {})",
                self.alpha_bars.len()
            )));
        }
        if x_t.frames() != cond.frames() {
            return Err(Error::validation(
                "plan",
                format!(
                    "{} latent frames for a {}-frame plan",
                    x_t.frames(),
                    cond.frames()
                ),
            ));
        }
        if x_t.frame_shape() != cond.latent_size {
            return Err(Error::validation(
                "latent_size",
                format!(
                    "latents are {:?}, conditioning was prepared for {:?}",
                    x_t.frame_shape(),
                    cond.latent_size
                ),
            ));
        }
        let frames = (0..x_t.frames())
            .into_par_iter()
            .map(|f| self.forward_frame(&x_t.frame(f)?, t, f, cond))
            .collect::<Result<Vec<_>>>()?;
        LatentVideo::from_frames(&frames)
    }
}

/// Returns the exact noise that maps a known target to the current latents:
/// `ε = (x_t − √ᾱ_t·x0)/√(1−ᾱ_t)`.
#[derive(Debug, Clone)]
pub struct TrueNoiseOracle {
    target: LatentVideo,
    sched: NoiseSchedule,
}

impl TrueNoiseOracle {
    pub fn new(target: LatentVideo, sched: NoiseSchedule) -> Self {
        Self { target, sched }
    }

    pub fn target(&self) -> &LatentVideo {
        &self.target
    }
}

impl NoisePredictor for TrueNoiseOracle {
    type Conditioning = ();

    fn prepare(&self, plan: &PromptPlan, _: Option<&[RefContext]>, _: Branch, latent_size: (usize, usize)) -> Result<()> {
        if plan.total_frames != self.target.frames() || latent_size != self.target.frame_shape() {
            return Err(Error::validation(
                "plan",
                "oracle target shape differs from the requested generation",
            ));
        }
        Ok(())
    }

    fn predict(&self, x_t: &LatentVideo, t: usize, _: &()) -> Result<LatentVideo> {
        let ab = self.sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.same_shape(&self.target, "oracle")?;
        let data = x_t
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&x, &x0)| ((x as f64 - a * x0 as f64) / b) as f32)
            .collect();
        LatentVideo::new(Tensor::new(x_t.tensor().shape().to_vec(), data)?)
    }
}

/// `x0_pred` implied by the model at `(x_t, t)`.
pub fn predicted_clean<P: NoisePredictor>(
    model: &P,
    x_t: &LatentVideo,
    t: usize,
    cond: &P::Conditioning,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    predict_x0(x_t, &model.predict(x_t, t, cond)?, t, sched)
}
