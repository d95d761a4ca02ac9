//! Region- and time-composed cross-attention, and reference-frame attention.
//!
//! For frame `i` with global prompt `p^i` and sub-objects `p^i_j` in masks
//! `M^i_j`:
//!
//! ```text
//! part_j   = softmax(Q Kⱼᵀ/√d) Vⱼ ⊙ Mⱼ          Kⱼ = W_K φ(p^i_j), Vⱼ = W_V φ(p^i_j)
//! region   = Σⱼ part_j
//! original = softmax(Q Kᵀ/√d) V                 K = W_K φ(p^i),   V = W_V φ(p^i)
//! frame_i  = α·original + (1 − α)·region
//! out      = stack(frame_0, …, frame_{t−1})
//! ```
//!
//! The mask multiplies the attention *output* rows, so softmax rows stay
//! normalized. Reference attention takes its keys and values from encoded
//! reference frames, with the object's masks applied to Q, K and V.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoders::{RefContext, TextEmbedding, TextEncoder};
use crate::error::{Error, Result};
use crate::plan::{rasterize_mask, PromptPlan, RegionMask, TemporalSegment};
use crate::tensor::{matmul, seeded_normal, Tensor};

/// How uncovered background positions are blended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendMode {
    /// `α·original + (1−α)·region` everywhere; uncovered rows are scaled by α.
    #[default]
    Literal,
    /// Rows no sub-object covers take `original` unchanged.
    CoverageRenormalized,
}

/// Number of frequencies per axis in the optional positional code.
pub const POSITIONAL_FREQUENCIES: usize = 4;

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    heads: usize,
    blend: BlendMode,
    positional_gain: f32,
}

impl AttentionLayer {
    pub fn from_weights(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let (_, d) = w_q.dims2()?;
        let (kd, dk) = w_k.dims2()?;
        let (vd, dv) = w_v.dims2()?;
        if dk != d || dv != d || kd != vd {
            return Err(Error::dim(format!(
                "projection shapes W_Q {:?}, W_K {:?}, W_V {:?} disagree",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads: 1,
            blend: BlendMode::Literal,
            positional_gain: 0.0,
        })
    }

    /// Projections drawn from N(0, 1/fan_in).
    pub fn seeded(query_dim: usize, key_dim: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |rows: usize, cols: usize| seeded_normal(&mut rng, &[rows, cols], 1.0 / (rows as f64).sqrt());
        let w_q = draw(query_dim, d);
        let w_k = draw(key_dim, d);
        let w_v = draw(key_dim, d);
        Self::from_weights(w_q, w_k, w_v).expect("consistent seeded shapes")
    }

    pub fn with_heads(mut self, heads: usize) -> Result<Self> {
        if heads == 0 || self.d() % heads != 0 {
            return Err(Error::validation(
                "heads",
                format!("{heads} heads do not divide d = {}", self.d()),
            ));
        }
        self.heads = heads;
        Ok(self)
    }

    pub fn with_blend_mode(mut self, mode: BlendMode) -> Self {
        self.blend = mode;
        self
    }

    /// Adds `gain·P(position)` to reference-attention queries and keys, where
    /// `P` is a Fourier code of the normalized cell center. Zero disables it.
    pub fn with_positional_gain(mut self, gain: f32) -> Result<Self> {
        if gain != 0.0 && self.d() < 4 * POSITIONAL_FREQUENCIES {
            return Err(Error::validation(
                "positional_gain",
                format!("d = {} is too small for the positional code", self.d()),
            ));
        }
        self.positional_gain = gain;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn query_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn blend_mode(&self) -> BlendMode {
        self.blend
    }

    pub fn positional_gain(&self) -> f32 {
        self.positional_gain
    }

    pub fn weights(&self) -> (&Tensor, &Tensor, &Tensor) {
        (&self.w_q, &self.w_k, &self.w_v)
    }

    /// Projects `[h·w, query_dim]` frame features into a query.
    pub fn query(&self, features: &Tensor, resolution: (usize, usize)) -> Result<FrameQuery> {
        FrameQuery::new(matmul(features, &self.w_q)?, resolution)
    }

    fn project_kv(&self, source: &Tensor, what: &str) -> Result<(Tensor, Tensor)> {
        let (_, cols) = source.dims2()?;
        if cols != self.key_dim() {
            return Err(Error::dim(format!(
                "{what} has width {cols}, layer key side expects {}",
                self.key_dim()
            )));
        }
        Ok((matmul(source, &self.w_k)?, matmul(source, &self.w_v)?))
    }
}

/// Projected queries of one frame at one spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuery {
    q: Tensor,
    height: usize,
    width: usize,
}

impl FrameQuery {
    pub fn new(q: Tensor, (height, width): (usize, usize)) -> Result<Self> {
        let (rows, _) = q.dims2()?;
        if rows != height * width {
            return Err(Error::dim(format!(
                "query has {rows} rows for a {height}x{width} frame"
            )));
        }
        Ok(Self { q, height, width })
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    fn check_mask(&self, mask: &RegionMask) -> Result<()> {
        if mask.resolution() != self.resolution() {
            return Err(Error::dim(format!(
                "mask resolution {:?} differs from query resolution {:?}",
                mask.resolution(),
                self.resolution()
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention with optional row skipping.
///
/// Rows where `rows` is false are left at zero. `phantom` extra key tokens
/// with all-zero key and value rows take part in every softmax (their logit
/// is exactly 0 and they add nothing to the numerator).
fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    rows: Option<&[bool]>,
    phantom: usize,
) -> Tensor {
    let (m, d) = (q.shape()[0], q.shape()[1]);
    let n = k.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0f32; m * d];
    let mut logits = vec![0.0f64; n];
    let mut acc = vec![0.0f64; dh];
    for i in 0..m {
        if rows.is_some_and(|r| !r[i]) {
            continue;
        }
        let qi = q.row(i);
        for h in 0..heads {
            let qh = &qi[h * dh..(h + 1) * dh];
            let mut max = if phantom > 0 { 0.0 } else { f64::NEG_INFINITY };
            for (j, l) in logits.iter_mut().enumerate() {
                let kh = &k.row(j)[h * dh..(h + 1) * dh];
                *l = crate::tensor::dot(qh, kh) * scale;
                max = max.max(*l);
            }
            let mut denom = phantom as f64 * (-max).exp();
            acc.fill(0.0);
            for (j, &l) in logits.iter().enumerate() {
                let w = (l - max).exp();
                denom += w;
                let vh = &v.row(j)[h * dh..(h + 1) * dh];
                for (a, &vv) in acc.iter_mut().zip(vh) {
                    *a += w * vv as f64;
                }
            }
            if n == 0 {
                continue;
            }
            let dst = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (o, a) in dst.iter_mut().zip(&acc) {
                *o = (a / denom) as f32;
            }
        }
    }
    Tensor::from_parts(vec![m, d], out)
}

/// Per-position channel vectors `[h·w, c]` of a `[c, h, w]` feature map.
pub fn channel_features(frame: &Tensor) -> Result<Tensor> {
    let [c, h, w] = frame.shape()[..] else {
        return Err(Error::dim(format!(
            "feature map must be [c, h, w], got {:?}",
            frame.shape()
        )));
    };
    frame.reshape([c, h * w])?.transpose()
}

/// `softmax(Q Kᵀ/√d) V` with `K = φ·W_K`, `V = φ·W_V`.
pub fn cross_attention(q: &FrameQuery, emb: &TextEmbedding, layer: &AttentionLayer) -> Result<Tensor> {
    attend_text(q, emb, layer, None)
}

fn attend_text(
    q: &FrameQuery,
    emb: &TextEmbedding,
    layer: &AttentionLayer,
    rows: Option<&[bool]>,
) -> Result<Tensor> {
    check_query_width(q, layer)?;
    let (k, v) = layer.project_kv(emb.values(), "text embedding")?;
    Ok(attend(q.q(), &k, &v, layer.heads, rows, 0))
}

fn check_query_width(q: &FrameQuery, layer: &AttentionLayer) -> Result<()> {
    if q.q().shape()[1] != layer.d() {
        return Err(Error::dim(format!(
            "query width {} differs from layer d = {}",
            q.q().shape()[1],
            layer.d()
        )));
    }
    Ok(())
}

/// Cross-attention of one sub-object, with rows outside its mask zeroed.
pub fn masked_subobject_attention(
    q: &FrameQuery,
    sub_emb: &TextEmbedding,
    mask: &RegionMask,
    layer: &AttentionLayer,
) -> Result<Tensor> {
    q.check_mask(mask)?;
    attend_text(q, sub_emb, layer, Some(mask.values()))
}

/// Elementwise sum of per-object attention outputs.
pub fn compose_regions(parts: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::validation("parts", "need at least one region part"))?;
    let mut sum = first.clone();
    for p in rest {
        sum.add_assign(p)?;
    }
    Ok(sum)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(
            "alpha",
            format!("must lie in [0, 1], got {alpha}"),
        ));
    }
    Ok(())
}

/// `α·original + (1−α)·region`.
pub fn blend_global(original: &Tensor, region: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if original.shape() != region.shape() {
        return Err(Error::dim(format!(
            "blend: original {:?} vs region {:?}",
            original.shape(),
            region.shape()
        )));
    }
    // exact endpoints, including the sign of zero
    if alpha == 1.0 {
        return Ok(original.clone());
    }
    if alpha == 0.0 {
        return Ok(region.clone());
    }
    let (a, b) = (alpha as f32, (1.0 - alpha) as f32);
    original.zip_map(region, "blend", |o, r| a * o + b * r)
}

/// Like [`blend_global`] on covered rows; uncovered rows take `original`.
pub fn blend_global_renormalized(
    original: &Tensor,
    region: &Tensor,
    alpha: f64,
    coverage: &RegionMask,
) -> Result<Tensor> {
    let blended = blend_global(original, region, alpha)?;
    let (rows, d) = blended.dims2()?;
    if coverage.values().len() != rows {
        return Err(Error::dim(format!(
            "coverage mask has {} cells for {rows} rows",
            coverage.values().len()
        )));
    }
    let mut data = blended.into_data();
    for (r, &covered) in coverage.values().iter().enumerate() {
        if !covered {
            data[r * d..(r + 1) * d].copy_from_slice(original.row(r));
        }
    }
    Ok(Tensor::from_parts(vec![rows, d], data))
}

/// Stacks per-frame outputs into `[t, h·w, d]`.
pub fn temporal_concat(frames: &[Tensor]) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::validation("frames", "need at least one frame"));
    }
    Tensor::stack(frames)
}

/// Every intermediate of one frame's composition.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub original: Tensor,
    pub parts: Vec<Tensor>,
    pub region: Tensor,
    pub blended: Tensor,
}

/// Embeddings and masks of one segment at one resolution.
#[derive(Debug, Clone)]
pub struct PreparedSegment {
    pub global: TextEmbedding,
    pub objects: Vec<(TextEmbedding, RegionMask)>,
    pub coverage: RegionMask,
}

impl PreparedSegment {
    pub fn new(segment: &TemporalSegment, encoder: &TextEncoder, resolution: (usize, usize)) -> Result<Self> {
        let (h, w) = resolution;
        let global = encoder.encode(&segment.global_prompt)?;
        let mut coverage = RegionMask::filled(h, w, false);
        let mut objects = Vec::with_capacity(segment.sub_objects.len());
        for obj in &segment.sub_objects {
            let mask = rasterize_mask(&obj.bbox, h, w);
            coverage = coverage.union(&mask)?;
            objects.push((encoder.encode(&obj.prompt)?, mask));
        }
        Ok(Self {
            global,
            objects,
            coverage,
        })
    }

    /// Runs the four composition steps for one frame and keeps every
    /// intermediate.
    pub fn trace(&self, q: &FrameQuery, alpha: f64, layer: &AttentionLayer) -> Result<AttentionTrace> {
        let original = cross_attention(q, &self.global, layer)?;
        let parts = self
            .objects
            .iter()
            .map(|(emb, mask)| masked_subobject_attention(q, emb, mask, layer))
            .collect::<Result<Vec<_>>>()?;
        let region = compose_regions(&parts)?;
        let blended = match layer.blend {
            BlendMode::Literal => blend_global(&original, &region, alpha)?,
            BlendMode::CoverageRenormalized => {
                blend_global_renormalized(&original, &region, alpha, &self.coverage)?
            }
        };
        Ok(AttentionTrace {
            original,
            parts,
            region,
            blended,
        })
    }
}

/// A plan's embeddings and masks precomputed for one attention resolution.
#[derive(Debug, Clone)]
pub struct PreparedPlan {
    segments: Vec<PreparedSegment>,
    frame_segment: Vec<usize>,
    alpha: f64,
    resolution: (usize, usize),
}

impl PreparedPlan {
    pub fn new(plan: &PromptPlan, encoder: &TextEncoder, resolution: (usize, usize)) -> Result<Self> {
        plan.validate()?;
        let segments = plan
            .segments
            .iter()
            .map(|s| PreparedSegment::new(s, encoder, resolution))
            .collect::<Result<Vec<_>>>()?;
        let frame_segment = (0..plan.total_frames)
            .map(|f| plan.segment_index_for_frame(f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            segments,
            frame_segment,
            alpha: plan.alpha,
            resolution,
        })
    }

    pub fn frames(&self) -> usize {
        self.frame_segment.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn segment_of(&self, frame: usize) -> &PreparedSegment {
        &self.segments[self.frame_segment[frame]]
    }

    pub fn trace_frame(&self, frame: usize, q: &FrameQuery, layer: &AttentionLayer) -> Result<AttentionTrace> {
        if frame >= self.frames() {
            return Err(Error::Range(format!(
                "frame {frame} outside [0, {})",
                self.frames()
            )));
        }
        if q.resolution() != self.resolution {
            return Err(Error::dim(format!(
                "query resolution {:?} differs from prepared resolution {:?}",
                q.resolution(),
                self.resolution
            )));
        }
        self.segment_of(frame).trace(q, self.alpha, layer)
    }

    pub fn attend_frame(&self, frame: usize, q: &FrameQuery, layer: &AttentionLayer) -> Result<Tensor> {
        Ok(self.trace_frame(frame, q, layer)?.blended)
    }
}

/// Full composition over a plan: one query per frame in, `[t, h·w, d]` out.
/// Frames are processed in parallel and stacked in order.
pub fn spatio_temporal_cross_attention(
    queries: &[FrameQuery],
    plan: &PromptPlan,
    layer: &AttentionLayer,
    encoder: &TextEncoder,
) -> Result<Tensor> {
    if queries.len() != plan.total_frames {
        return Err(Error::validation(
            "queries",
            format!(
                "{} frame queries for a {}-frame plan",
                queries.len(),
                plan.total_frames
            ),
        ));
    }
    let resolution = queries[0].resolution();
    let prepared = PreparedPlan::new(plan, encoder, resolution)?;
    let frames = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| prepared.attend_frame(i, q, layer))
        .collect::<Result<Vec<_>>>()?;
    temporal_concat(&frames)
}

/// Fourier code of a normalized cell center, written into `out[..4F]`.
fn positional_code(u: f64, v: f64, out: &mut [f64]) {
    for f in 0..POSITIONAL_FREQUENCIES {
        let w = std::f64::consts::TAU * (1u32 << f) as f64;
        out[4 * f] = (w * u).cos();
        out[4 * f + 1] = (w * u).sin();
        out[4 * f + 2] = (w * v).cos();
        out[4 * f + 3] = (w * v).sin();
    }
}

fn add_positional(t: &mut [f32], d: usize, grid: (usize, usize), gain: f32) {
    let (h, w) = grid;
    let mut code = [0.0f64; 4 * POSITIONAL_FREQUENCIES];
    for (idx, row) in t.chunks_mut(d).enumerate() {
        let p = idx % (h * w);
        let (r, c) = (p / w, p % w);
        positional_code((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64, &mut code);
        for (x, &pc) in row.iter_mut().zip(&code) {
            *x += gain * pc as f32;
        }
    }
}

/// Keys and values of one reference context, masked by its object region.
/// Only unmasked tokens are stored; masked tokens are all-zero rows and are
/// accounted for as phantom tokens.
#[derive(Debug, Clone)]
pub struct ProjectedReference {
    k: Tensor,
    v: Tensor,
    masked_tokens: usize,
    label: Option<String>,
}

impl ProjectedReference {
    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn kept_tokens(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn masked_tokens(&self) -> usize {
        self.masked_tokens
    }
}

impl AttentionLayer {
    /// `K = W_K·(M ⊙ x_ref)`, `V = W_V·(M ⊙ x_ref)` for the context's object mask.
    pub fn project_reference(&self, ctx: &RefContext) -> Result<ProjectedReference> {
        let x = ctx.x_ref();
        let (_, cols) = x.dims2()?;
        if cols != self.key_dim() {
            return Err(Error::dim(format!(
                "x_ref has width {cols}, layer key side expects {}",
                self.key_dim()
            )));
        }
        let mask = ctx.token_mask();
        let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let d = self.d();
        let (mut k, mut v) = (Vec::with_capacity(kept.len() * d), Vec::with_capacity(kept.len() * d));
        if !kept.is_empty() {
            let mut rows = Vec::with_capacity(kept.len() * cols);
            for &i in &kept {
                rows.extend_from_slice(x.row(i));
            }
            let src = Tensor::from_parts(vec![kept.len(), cols], rows);
            let (pk, pv) = self.project_kv(&src, "x_ref")?;
            k = pk.into_data();
            v = pv.into_data();
            if self.positional_gain != 0.0 {
                let grid = ctx.grid();
                let mut code = [0.0f64; 4 * POSITIONAL_FREQUENCIES];
                for (row, &tok) in k.chunks_mut(d).zip(&kept) {
                    let p = tok % (grid.0 * grid.1);
                    let (r, c) = (p / grid.1, p % grid.1);
                    positional_code(
                        (c as f64 + 0.5) / grid.1 as f64,
                        (r as f64 + 0.5) / grid.0 as f64,
                        &mut code,
                    );
                    for (x, &pc) in row.iter_mut().zip(&code) {
                        *x += self.positional_gain * pc as f32;
                    }
                }
            }
        }
        // An empty kept set is stored as one explicit zero row.
        let n = kept.len();
        if n == 0 {
            k = vec![0.0; d];
            v = vec![0.0; d];
        }
        let stored = n.max(1);
        Ok(ProjectedReference {
            k: Tensor::from_parts(vec![stored, d], k),
            v: Tensor::from_parts(vec![stored, d], v),
            masked_tokens: mask.len() - stored,
            label: ctx.label().map(str::to_owned),
        })
    }
}

/// Reference attention against a pre-projected context.
pub fn attend_reference(
    q: &FrameQuery,
    reference: &ProjectedReference,
    current_mask: &RegionMask,
    layer: &AttentionLayer,
) -> Result<Tensor> {
    q.check_mask(current_mask)?;
    check_query_width(q, layer)?;
    let mut qd = q.q().data().to_vec();
    if layer.positional_gain != 0.0 {
        add_positional(&mut qd, layer.d(), q.resolution(), layer.positional_gain);
    }
    let qm = Tensor::from_parts(q.q().shape().to_vec(), qd)
        .scale_rows(&current_mask.weights())?;
    Ok(attend(
        &qm,
        &reference.k,
        &reference.v,
        layer.heads,
        Some(current_mask.values()),
        reference.masked_tokens,
    ))
}

/// `softmax(Q Kᵀ/√d) V` with `K = W_K x_ref`, `V = W_V x_ref`, the current
/// object mask applied to Q and the output, the reference object mask to K
/// and V.
pub fn reference_frame_attention(
    q: &FrameQuery,
    ctx: &RefContext,
    current_mask: &RegionMask,
    layer: &AttentionLayer,
) -> Result<Tensor> {
    let projected = layer.project_reference(ctx)?;
    attend_reference(q, &projected, current_mask, layer)
}
