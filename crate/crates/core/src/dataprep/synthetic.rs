//! Synthetic clips with known motion.

use super::pgm::GrayFrame;

/// `frames` copies of a smooth textured frame.
pub fn static_clip(height: usize, width: usize, frames: usize) -> Vec<GrayFrame> {
    translating_pattern(height, width, frames, (0.0, 0.0))
}

/// Smooth two-scale sinusoidal texture moving by `shift = (dx, dy)` pixels per frame.
pub fn translating_pattern(height: usize, width: usize, frames: usize, shift: (f64, f64)) -> Vec<GrayFrame> {
    (0..frames)
        .map(|k| {
            let (ox, oy) = (shift.0 * k as f64, shift.1 * k as f64);
            GrayFrame::from_fn(height, width, |r, c| {
                let x = c as f64 - ox;
                let y = r as f64 - oy;
                (128.0 + 50.0 * (x / 3.0).sin() * (y / 4.0).cos() + 30.0 * (x / 5.0 + y / 7.0).cos()) as f32
            })
            .expect("positive frame size")
        })
        .collect()
}

/// Paraboloid `k·|p − c_k|²` whose center moves `fraction·width` pixels per
/// frame. Every local quadratic fit is exact, so the true flow is recovered
/// at any shift size.
pub fn translating_bowl(height: usize, width: usize, frames: usize, fraction: f64) -> Vec<GrayFrame> {
    let shift = fraction * width as f64;
    let k = 100.0 / (width * width) as f64;
    (0..frames)
        .map(|f| {
            let cx = 0.5 * width as f64 + shift * f as f64;
            let cy = 0.5 * height as f64;
            GrayFrame::from_fn(height, width, |r, c| {
                let (dx, dy) = (c as f64 - cx, r as f64 - cy);
                (k * (dx * dx + dy * dy)) as f32
            })
            .expect("positive frame size")
        })
        .collect()
}
