//! Compositional video diffusion at toy scale.
//!
//! Prompt plans split a clip into temporal segments with boxed sub-objects.
//! Cross-attention composes per-object outputs inside their masks and blends
//! them with the global prompt; reference-frame attention carries objects
//! across auto-regressive chunks. A deterministic DDIM sampler drives a small
//! seeded denoiser, and the data-prep tools score clips by optical flow.

pub mod attention;
pub mod client;
pub mod dataprep;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod plan;
pub mod templates;
pub mod tensor;

pub use attention::{AttentionLayer, BlendMode, FrameQuery};
pub use diffusion::{LatentVideo, NoiseSchedule, SamplerConfig, ToyDenoiser};
pub use encoders::{RefContext, ReferenceEncoder, TextEmbedding, TextEncoder};
pub use error::{Error, Result};
pub use plan::{parse_plan, BBox, PromptPlan, RegionMask, SubObject, TemporalSegment};
pub use tensor::Tensor;
