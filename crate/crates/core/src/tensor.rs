//! Dense row-major `f32` tensors and the handful of kernels the engine needs.
//!
//! Reductions (matmul, conv2d) accumulate in `f64` with a fixed loop order,
//! so identical inputs always produce bit-identical outputs.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the tensor file format.
pub const TENSOR_MAGIC: &[u8; 4] = b"VTLT";
/// Current tensor file format version.
pub const TENSOR_VERSION: u8 = 1;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor rank must be at least 1"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::dim(format!("zero-sized dimension in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "tensor data",
                format!("non-finite value at flat index {pos}"),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        Self::new(shape, (0..len).map(f).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Internal constructor for data the caller knows is consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value at a multi-dimensional index. Panics on a bad index.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    /// The `i`-th slice along the leading axis.
    pub fn slice0(&self, i: usize) -> Result<Self> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(Error::dim(format!(
                "slice {i} along axis 0 of shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Contiguous range of leading-axis slices, keeping the rank.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape[0] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) along axis 0 of shape {:?}",
                start + len,
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Multiplies row `i` of a rank-2 tensor by `weights[i]`.
    pub fn scale_rows(&self, weights: &[f32]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if weights.len() != m {
            return Err(Error::dim(format!(
                "scale_rows: {} weights for {m} rows",
                weights.len()
            )));
        }
        let mut data = self.data.clone();
        for (row, &w) in data.chunks_mut(n).zip(weights) {
            for v in row {
                *v *= w;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("stack", "needs at least one tensor"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for (i, p) in parts.iter().enumerate() {
            if p.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack: part {i} has shape {:?}, expected {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat0(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("concat", "needs at least one tensor"))?;
        let mut data = Vec::new();
        let mut lead = 0;
        for (i, p) in parts.iter().enumerate() {
            if p.rank() != first.rank() || p.shape[1..] != first.shape[1..] {
                return Err(Error::dim(format!(
                    "concat: part {i} has shape {:?}, incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_parts(shape, data))
    }

    // ---- serialization -------------------------------------------------

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} exceeds 255", self.rank())));
        }
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&[TENSOR_VERSION, self.rank() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)
            .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        if head[4] != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported version {}", head[4])));
        }
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)
                .map_err(|e| Error::Format(format!("truncated dims: {e}")))?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let len = check_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated data: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `c[i,j] = Σ_r a[i,r]·b[r,j]`, accumulated in `f64`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: {:?} x {:?} (inner dimensions {k} and {k2})",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for r in 0..k {
            let air = ad[i * k + r] as f64;
            if air == 0.0 {
                continue;
            }
            let brow = &bd[r * n..(r + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += air * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_transposed: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(ar, b.row(j)) as f32;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Numerically stable softmax over each row of a rank-2 tensor.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, n) = a.dims2()?;
    let mut data = a.data().to_vec();
    for row in data.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(row.len());
    for &v in row.iter() {
        let e = ((v - max) as f64).exp();
        sum += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

/// Stride-1 cross-correlation of `[c_in, h, w]` with `[c_out, c_in, kh, kw]`
/// plus a per-output-channel bias, zero padding on all sides.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize, bias: &Tensor) -> Result<Tensor> {
    let [c_in, h, w] = input.shape()[..] else {
        return Err(Error::dim(format!(
            "conv2d input must be [c_in, h, w], got {:?}",
            input.shape()
        )));
    };
    let [c_out, kc, kh, kw] = kernel.shape()[..] else {
        return Err(Error::dim(format!(
            "conv2d kernel must be [c_out, c_in, kh, kw], got {:?}",
            kernel.shape()
        )));
    };
    if kc != c_in {
        return Err(Error::dim(format!(
            "conv2d: kernel {:?} expects {kc} input channels, input {:?} has {c_in}",
            kernel.shape(),
            input.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!(
            "conv2d: kernel size {kh}x{kw} must be odd"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(format!(
            "conv2d: bias {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;
    let (id, kd) = (input.data(), kernel.data());
    let taps = c_in * kh * kw;
    let np = oh * ow;
    // im2col: row (c, ky, kx), column (y, x); zero where the tap hits padding
    let mut cols = vec![0.0f32; taps * np];
    for c in 0..c_in {
        let plane = &id[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (c * kh + ky) * kw + kx;
                let x0 = padding.saturating_sub(kx);
                let x1 = ow.min((w + padding).saturating_sub(kx));
                if x0 >= x1 {
                    continue;
                }
                for y in 0..oh {
                    let iy = y + ky;
                    if iy < padding || iy >= h + padding {
                        continue;
                    }
                    let src = (iy - padding) * w + x0 + kx - padding;
                    let dst = r * np + y * ow + x0;
                    cols[dst..dst + x1 - x0].copy_from_slice(&plane[src..src + x1 - x0]);
                }
            }
        }
    }
    let mut out = vec![0.0f32; c_out * np];
    let mut acc = vec![0.0f64; np];
    for o in 0..c_out {
        acc.fill(bias.data()[o] as f64);
        for (r, &kv) in kd[o * taps..(o + 1) * taps].iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            let kv = kv as f64;
            for (a, &v) in acc.iter_mut().zip(&cols[r * np..(r + 1) * np]) {
                *a += kv * v as f64;
            }
        }
        for (dst, &a) in out[o * np..(o + 1) * np].iter_mut().zip(&acc) {
            *dst = a as f32;
        }
    }
    Ok(Tensor::from_parts(vec![c_out, oh, ow], out))
}

/// Tensor of N(0, std²) draws.
pub(crate) fn seeded_normal(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.sample::<f64, _>(rand_distr::StandardNormal) * std) as f32)
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
