//! Text and reference-frame encoders.
//!
//! Text embeddings are hash-seeded: every whitespace token maps to a fixed
//! unit-norm pseudo-random vector, so equal prompts always give equal keys
//! and values. The reference encoder lifts 4-channel latent frames into
//! 1024-wide attention tokens through a 3×3 convolution and a one-hidden-layer
//! projection.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::plan::RegionMask;
use crate::tensor::{conv2d, matmul, seeded_normal, silu, Tensor};

/// 64-bit FNV-1a.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    values: Tensor,
}

impl TextEmbedding {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Deterministic whitespace-token encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    dim: usize,
    vocab_seed: u64,
}

impl TextEncoder {
    pub fn new(dim: usize, vocab_seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim, vocab_seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str, out: &mut Vec<f32>) {
        let mut key = self.vocab_seed.to_le_bytes().to_vec();
        key.extend_from_slice(token.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&key));
        let raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        out.extend(raw.iter().map(|v| (v / norm) as f32));
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::validation("prompt", "prompt is empty"));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in &tokens {
            self.token_vector(t, &mut data);
        }
        Ok(TextEmbedding {
            values: Tensor::from_parts(vec![tokens.len(), self.dim], data),
        })
    }

    /// The empty-prompt embedding used on the unconditional guidance branch:
    /// a single vector for the empty token, which no prompt can produce.
    pub fn unconditional(&self) -> TextEmbedding {
        let mut data = Vec::with_capacity(self.dim);
        self.token_vector("", &mut data);
        TextEmbedding {
            values: Tensor::from_parts(vec![1, self.dim], data),
        }
    }
}

/// Encodes `prompt` with vocabulary seed 0.
pub fn encode_text(prompt: &str, dim: usize) -> Result<TextEmbedding> {
    TextEncoder::new(dim, 0).encode(prompt)
}

pub const REF_IN_CHANNELS: usize = 4;
pub const REF_CONV_CHANNELS: usize = 320;
pub const REF_KERNEL: usize = 3;
pub const REF_PADDING: usize = 1;
pub const REF_HIDDEN: usize = 320;
pub const REF_OUT: usize = 1024;
/// Number of reference frames taken from the previous chunk.
pub const REF_FRAMES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => silu(x),
            Activation::Identity => x,
        }
    }
}

/// Conv (4→320, 3×3, padding 1) followed by a per-position MLP 320→320→1024.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    conv_kernel: Tensor,
    conv_bias: Tensor,
    hidden_w: Tensor,
    hidden_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
    activation: Activation,
}

impl ReferenceEncoder {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_conv = (REF_IN_CHANNELS * REF_KERNEL * REF_KERNEL) as f64;
        Self {
            conv_kernel: seeded_normal(
                &mut rng,
                &[REF_CONV_CHANNELS, REF_IN_CHANNELS, REF_KERNEL, REF_KERNEL],
                1.0 / fan_conv.sqrt(),
            ),
            conv_bias: seeded_normal(&mut rng, &[REF_CONV_CHANNELS], 0.01),
            hidden_w: seeded_normal(
                &mut rng,
                &[REF_CONV_CHANNELS, REF_HIDDEN],
                1.0 / (REF_CONV_CHANNELS as f64).sqrt(),
            ),
            hidden_b: seeded_normal(&mut rng, &[REF_HIDDEN], 0.01),
            out_w: seeded_normal(&mut rng, &[REF_HIDDEN, REF_OUT], 1.0 / (REF_HIDDEN as f64).sqrt()),
            out_b: seeded_normal(&mut rng, &[REF_OUT], 0.01),
            activation: Activation::Silu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn conv_kernel(&self) -> &Tensor {
        &self.conv_kernel
    }

    pub fn conv_bias(&self) -> &Tensor {
        &self.conv_bias
    }

    pub fn hidden(&self) -> (&Tensor, &Tensor) {
        (&self.hidden_w, &self.hidden_b)
    }

    pub fn output(&self) -> (&Tensor, &Tensor) {
        (&self.out_w, &self.out_b)
    }

    /// Encodes `[l, 4, h, w]` latent frames into `[l·h·w, 1024]` tokens,
    /// frame-major then row-major.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let [l, c, h, w] = frames.shape()[..] else {
            return Err(Error::dim(format!(
                "reference frames must be [l, 4, h, w], got {:?}",
                frames.shape()
            )));
        };
        if c != REF_IN_CHANNELS {
            return Err(Error::dim(format!(
                "reference frames have {c} channels, expected {REF_IN_CHANNELS}"
            )));
        }
        let hw = h * w;
        let mut conv_tokens = Vec::with_capacity(l * hw * REF_CONV_CHANNELS);
        for f in 0..l {
            let feat = conv2d(&frames.slice0(f)?, &self.conv_kernel, REF_PADDING, &self.conv_bias)?;
            let planes = feat.data();
            for p in 0..hw {
                conv_tokens.extend((0..REF_CONV_CHANNELS).map(|ch| planes[ch * hw + p]));
            }
        }
        let tokens = Tensor::from_parts(vec![l * hw, REF_CONV_CHANNELS], conv_tokens);
        let hidden = add_row_bias(&matmul(&tokens, &self.hidden_w)?, &self.hidden_b)
            .map(|v| self.activation.apply(v));
        Ok(add_row_bias(&matmul(&hidden, &self.out_w)?, &self.out_b))
    }
}

fn add_row_bias(t: &Tensor, bias: &Tensor) -> Tensor {
    let n = bias.len();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}

/// Encoded reference frames plus the region the object occupies in them.
#[derive(Debug, Clone)]
pub struct RefContext {
    x_ref: Arc<Tensor>,
    object_mask: RegionMask,
    frame_span: (usize, usize),
    label: Option<String>,
}

impl RefContext {
    pub fn new(
        x_ref: Arc<Tensor>,
        object_mask: RegionMask,
        frame_span: (usize, usize),
        label: Option<String>,
    ) -> Result<Self> {
        let (rows, _) = x_ref.dims2()?;
        let expected = frame_span.1 * object_mask.height() * object_mask.width();
        if rows != expected {
            return Err(Error::dim(format!(
                "x_ref has {rows} tokens, expected {} frames x {}x{} = {expected}",
                frame_span.1,
                object_mask.height(),
                object_mask.width()
            )));
        }
        Ok(Self {
            x_ref,
            object_mask,
            frame_span,
            label,
        })
    }

    pub fn x_ref(&self) -> &Tensor {
        &self.x_ref
    }

    pub fn shared_x_ref(&self) -> Arc<Tensor> {
        Arc::clone(&self.x_ref)
    }

    pub fn object_mask(&self) -> &RegionMask {
        &self.object_mask
    }

    /// `(k, l)`: first reference frame index and number of frames.
    pub fn frame_span(&self) -> (usize, usize) {
        self.frame_span
    }

    pub fn ref_frames(&self) -> usize {
        self.frame_span.1
    }

    pub fn grid(&self) -> (usize, usize) {
        self.object_mask.resolution()
    }

    /// Sub-object prompt this context belongs to, if any.
    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Same encoded frames restricted to another object's region.
    pub fn for_object(&self, label: impl Into<String>, object_mask: RegionMask) -> Result<Self> {
        Self::new(
            Arc::clone(&self.x_ref),
            object_mask,
            self.frame_span,
            Some(label.into()),
        )
    }

    /// Token mask over `x_ref` rows (object mask repeated per frame).
    pub fn token_mask(&self) -> Vec<bool> {
        self.object_mask.repeat(self.frame_span.1)
    }
}

/// Encodes reference frames `f_{k:k+l}` with an unrestricted object mask.
pub fn encode_reference(frames: &Tensor, enc: &ReferenceEncoder, start_frame: usize) -> Result<RefContext> {
    let x_ref = enc.encode(frames)?;
    let [l, _, h, w] = frames.shape()[..] else {
        unreachable!("checked by encode")
    };
    RefContext::new(
        Arc::new(x_ref),
        RegionMask::filled(h, w, true),
        (start_frame, l),
        None,
    )
}
