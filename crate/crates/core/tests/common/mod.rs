//! Naive f64 loop oracles and seeded fixtures shared by the integration tests.
//! Nothing here calls the library kernels it is compared against.

#![allow(dead_code)]

use compvid::attention::{AttentionLayer, FrameQuery};
use compvid::plan::{BBox, RegionMask};
use compvid::tensor::Tensor;
use compvid::TextEmbedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> RegionMask {
    RegionMask::new(h, w, (0..h * w).map(|_| rng.random_bool(0.5)).collect()).unwrap()
}

/// Vertical strips covering the frame, with cut points on a 1/8 lattice.
pub fn strip_boxes(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
    let mut cuts: Vec<u32> = (1..8).collect();
    for i in (1..cuts.len()).rev() {
        cuts.swap(i, rng.random_range(0..=i));
    }
    let mut cuts: Vec<u32> = cuts[..n - 1].to_vec();
    cuts.sort_unstable();
    let mut edges = vec![0];
    edges.extend(cuts);
    edges.push(8);
    edges
        .windows(2)
        .map(|e| BBox::new(e[0] as f64 / 8.0, 0.0, (e[1] - e[0]) as f64 / 8.0, 1.0))
        .collect()
}

/// Row-major dense matrix in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn of(t: &Tensor) -> Mat {
        let s = t.shape();
        assert_eq!(s.len(), 2);
        Mat {
            rows: s[0],
            cols: s[1],
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn mul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut data = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for r in 0..self.cols {
                    s += self.at(i, r) * b.at(r, j);
                }
                data[i * b.cols + j] = s;
            }
        }
        Mat {
            rows: self.rows,
            cols: b.cols,
            data,
        }
    }

    pub fn mask_rows(&self, keep: &[bool]) -> Mat {
        let mut out = self.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out.data[r * self.cols..(r + 1) * self.cols].fill(0.0);
            }
        }
        out
    }
}

/// Single-head `softmax(q kᵀ/√d) v` over every key row.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q.cols as f64;
    let mut data = vec![0.0; q.rows * v.cols];
    for i in 0..q.rows {
        let logits: Vec<f64> = (0..k.rows)
            .map(|j| (0..q.cols).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / d.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..v.cols {
            data[i * v.cols + c] = (0..k.rows).map(|j| e[j] / z * v.at(j, c)).sum();
        }
    }
    Mat {
        rows: q.rows,
        cols: v.cols,
        data,
    }
}

pub fn text_attention(q: &FrameQuery, emb: &TextEmbedding, layer: &AttentionLayer) -> Mat {
    let (_, wk, wv) = layer.weights();
    let phi = Mat::of(emb.values());
    attention(&Mat::of(q.q()), &phi.mul(&Mat::of(wk)), &phi.mul(&Mat::of(wv)))
}

pub fn max_abs(a: &Tensor, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.data.len());
    a.data()
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}
