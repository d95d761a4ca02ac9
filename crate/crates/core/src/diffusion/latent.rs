use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Latent channel count.
pub const LATENT_CHANNELS: usize = 4;

/// `[frames, 4, height, width]` latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [f, c, h, w] if *f > 0 && *c == LATENT_CHANNELS && *h > 0 && *w > 0 => Ok(Self(t)),
            s => Err(Error::dim(format!(
                "latent video must be [frames, {LATENT_CHANNELS}, h, w], got {s:?}"
            ))),
        }
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros([frames, LATENT_CHANNELS, height, width])?)
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// Frame `i` as `[4, h, w]`.
    pub fn frame(&self, i: usize) -> Result<Tensor> {
        self.0.slice0(i)
    }

    pub fn frame_data(&self, i: usize) -> &[f32] {
        let n = LATENT_CHANNELS * self.height() * self.width();
        &self.0.data()[i * n..(i + 1) * n]
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        Self::new(Tensor::stack(frames)?)
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.0.narrow0(start, len)?)
    }

    pub fn concat(parts: &[LatentVideo]) -> Result<Self> {
        let tensors: Vec<Tensor> = parts.iter().map(|p| p.0.clone()).collect();
        Self::new(Tensor::concat0(&tensors)?)
    }

    pub fn same_shape(&self, other: &LatentVideo, what: &str) -> Result<()> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.0.shape(),
                other.0.shape()
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        self.0.write_to(w)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        Self::new(Tensor::read_from(r)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Tensor::load(path)?)
    }
}

impl TryFrom<Tensor> for LatentVideo {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        Self::new(t)
    }
}
