//! Dense optical flow by polynomial expansion (Farnebäck).
//!
//! Each frame is locally approximated as `f(u) ≈ uᵀAu + bᵀu + c` with a
//! certainty-weighted least-squares fit (normalized convolution), so borders
//! are handled without padding artifacts. A displacement `d` turns `b` into
//! `b − 2Ad`; per-pixel constraints are pooled over a Gaussian window and
//! refined coarse to fine.

use nalgebra::{Matrix6, Vector6};

use super::pgm::GrayFrame;
use crate::error::{Error, Result};

pub const PYRAMID_LEVELS: usize = 2;
pub const WINDOW: usize = 5;
pub const ITERATIONS: usize = 3;
const POLY_SIGMA: f64 = 1.1;
const POOL_SIGMA: f64 = 1.5;
pub const MIN_FRAME_SIZE: usize = 8;

/// Per-pixel displacement `(dx, dy)` in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl FlowField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> (f32, f32) {
        let i = row * self.width + col;
        (self.dx[i], self.dy[i])
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    /// Mean displacement vector.
    pub fn mean(&self) -> (f64, f64) {
        let n = self.dx.len() as f64;
        (
            self.dx.iter().map(|&v| v as f64).sum::<f64>() / n,
            self.dy.iter().map(|&v| v as f64).sum::<f64>() / n,
        )
    }

    /// Mean per-pixel magnitude `√(dx² + dy²)`.
    pub fn mean_magnitude(&self) -> f64 {
        let sum: f64 = self
            .dx
            .iter()
            .zip(&self.dy)
            .map(|(&x, &y)| (x as f64).hypot(y as f64))
            .sum();
        sum / self.dx.len() as f64
    }
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_frame(f: &GrayFrame) -> Self {
        Self {
            h: f.height(),
            w: f.width(),
            v: f.data().iter().map(|&x| x as f64).collect(),
        }
    }

    /// 2×2 box average; a trailing odd row or column is dropped.
    fn halve(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let i = 2 * r * self.w + 2 * c;
                v.push(0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]));
            }
        }
        Self { h, w, v }
    }
}

/// Quadratic coefficients per pixel: `A = [[a0, a2], [a2, a1]]`, `b = [b0, b1]`
/// in `(x = column, y = row)` order.
struct Expansion {
    h: usize,
    w: usize,
    a: Vec<[f64; 3]>,
    b: Vec<[f64; 2]>,
}

fn gaussian(radius: usize, sigma: f64) -> Vec<f64> {
    (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

fn expand(p: &Plane) -> Expansion {
    let r = (WINDOW / 2) as isize;
    let g = gaussian(WINDOW / 2, POLY_SIGMA);
    let (h, w) = (p.h as isize, p.w as isize);
    let mut a = Vec::with_capacity(p.v.len());
    let mut b = Vec::with_capacity(p.v.len());
    for y in 0..h {
        for x in 0..w {
            let mut gram = Matrix6::<f64>::zeros();
            let mut rhs = Vector6::<f64>::zeros();
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                    let (u, v) = (dx as f64, dy as f64);
                    let basis = Vector6::new(1.0, u, v, u * u, v * v, u * v);
                    gram += wt * basis * basis.transpose();
                    rhs += wt * p.v[(yy * w + xx) as usize] * basis;
                }
            }
            let coef = gram.lu().solve(&rhs).unwrap_or_else(Vector6::zeros);
            a.push([coef[3], coef[4], 0.5 * coef[5]]);
            b.push([coef[1], coef[2]]);
        }
    }
    Expansion {
        h: p.h,
        w: p.w,
        a,
        b,
    }
}

impl Expansion {
    /// `(A, b)` at a real-valued position. Outside the frame the quadratic at
    /// the nearest border point is extrapolated: `b(q) = b(p) + 2A(p)(q − p)`.
    fn sample(&self, x: f64, y: f64) -> ([f64; 3], [f64; 2]) {
        let px = x.clamp(0.0, (self.w - 1) as f64);
        let py = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let taps = [
            (y0 * self.w + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.w + x1, fx * (1.0 - fy)),
            (y1 * self.w + x0, (1.0 - fx) * fy),
            (y1 * self.w + x1, fx * fy),
        ];
        let mut a = [0.0; 3];
        let mut b = [0.0; 2];
        for (i, wt) in taps {
            if wt == 0.0 {
                continue;
            }
            for k in 0..3 {
                a[k] += wt * self.a[i][k];
            }
            for k in 0..2 {
                b[k] += wt * self.b[i][k];
            }
        }
        let (ex, ey) = (x - px, y - py);
        if ex != 0.0 || ey != 0.0 {
            b[0] += 2.0 * (a[0] * ex + a[2] * ey);
            b[1] += 2.0 * (a[2] * ex + a[1] * ey);
        }
        (a, b)
    }
}

/// Refines `flow` in place for one pyramid level.
fn refine(e1: &Expansion, e2: &Expansion, flow: &mut [[f64; 2]]) {
    let (h, w) = (e1.h, e1.w);
    let r = (WINDOW / 2) as isize;
    let g = gaussian(WINDOW / 2, POOL_SIGMA);
    // per-pixel AᵀA (xx, yy, xy) and AᵀΔb
    let mut m = vec![[0.0f64; 5]; h * w];
    for _ in 0..ITERATIONS {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = flow[i];
                let (a2, b2) = e2.sample(x as f64 + d[0], y as f64 + d[1]);
                let a1 = e1.a[i];
                let b1 = e1.b[i];
                let a = [0.5 * (a1[0] + a2[0]), 0.5 * (a1[1] + a2[1]), 0.5 * (a1[2] + a2[2])];
                let db = [
                    -0.5 * (b2[0] - b1[0]) + a[0] * d[0] + a[2] * d[1],
                    -0.5 * (b2[1] - b1[1]) + a[2] * d[0] + a[1] * d[1],
                ];
                m[i] = [
                    a[0] * a[0] + a[2] * a[2],
                    a[2] * a[2] + a[1] * a[1],
                    a[0] * a[2] + a[2] * a[1],
                    a[0] * db[0] + a[2] * db[1],
                    a[2] * db[0] + a[1] * db[1],
                ];
            }
        }
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = [0.0f64; 5];
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let mi = &m[yy as usize * w + xx as usize];
                        for k in 0..5 {
                            s[k] += wt * mi[k];
                        }
                    }
                }
                let reg = 1e-6 * (s[0] + s[1]) + 1e-12;
                let (gxx, gyy, gxy) = (s[0] + reg, s[1] + reg, s[2]);
                let det = gxx * gyy - gxy * gxy;
                flow[y as usize * w + x as usize] = [
                    (gyy * s[3] - gxy * s[4]) / det,
                    (gxx * s[4] - gxy * s[3]) / det,
                ];
            }
        }
    }
}

/// Dense flow from `a` to `b`: content at `p` in `a` appears at `p + d(p)` in `b`.
pub fn optical_flow(a: &GrayFrame, b: &GrayFrame) -> Result<FlowField> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::validation(
            "frames",
            format!(
                "frame sizes differ: {}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    if a.height() < MIN_FRAME_SIZE || a.width() < MIN_FRAME_SIZE {
        return Err(Error::validation(
            "frames",
            format!(
                "frames must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, got {}x{}",
                a.height(),
                a.width()
            ),
        ));
    }
    let mut pa = vec![Plane::from_frame(a)];
    let mut pb = vec![Plane::from_frame(b)];
    for _ in 1..PYRAMID_LEVELS {
        pa.push(pa.last().unwrap().halve());
        pb.push(pb.last().unwrap().halve());
    }
    let mut flow: Vec<[f64; 2]> = Vec::new();
    let mut prev_dims = (0, 0);
    for level in (0..PYRAMID_LEVELS).rev() {
        let (h, w) = (pa[level].h, pa[level].w);
        flow = if flow.is_empty() {
            vec![[0.0; 2]; h * w]
        } else {
            let (ph, pw) = prev_dims;
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w / 2).min(ph - 1), (i % w / 2).min(pw - 1));
                    let d = flow[y * pw + x];
                    [2.0 * d[0], 2.0 * d[1]]
                })
                .collect()
        };
        let e1 = expand(&pa[level]);
        let e2 = expand(&pb[level]);
        refine(&e1, &e2, &mut flow);
        prev_dims = (h, w);
    }
    Ok(FlowField {
        height: a.height(),
        width: a.width(),
        dx: flow.iter().map(|d| d[0] as f32).collect(),
        dy: flow.iter().map(|d| d[1] as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(h: usize, w: usize, shift: f64) -> GrayFrame {
        GrayFrame::from_fn(h, w, |r, c| {
            let x = c as f64 - shift;
            let y = r as f64;
            (128.0 + 50.0 * (x / 3.0).sin() * (y / 4.0).cos() + 30.0 * (x / 5.0 + y / 7.0).cos()) as f32
        })
        .unwrap()
    }

    #[test]
    fn identical_frames_have_zero_flow() {
        let f = wave(16, 20, 0.0);
        let flow = optical_flow(&f, &f).unwrap();
        assert_eq!((flow.height(), flow.width()), (16, 20));
        assert!(flow.dx().iter().chain(flow.dy()).all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_small_translation() {
        let flow = optical_flow(&wave(32, 32, 0.0), &wave(32, 32, 2.0)).unwrap();
        let (mx, my) = flow.mean();
        assert!((mx - 2.0).abs() < 0.5 && my.abs() < 0.5, "{mx} {my}");
    }

    #[test]
    fn rejects_small_or_mismatched_frames() {
        let small = GrayFrame::from_fn(7, 9, |_, _| 0.0).unwrap();
        assert!(optical_flow(&small, &small).is_err());
        let a = GrayFrame::from_fn(8, 8, |_, _| 0.0).unwrap();
        let b = GrayFrame::from_fn(8, 9, |_, _| 0.0).unwrap();
        assert!(optical_flow(&a, &b).is_err());
    }
}
