use super::latent::LatentVideo;
use crate::dataprep::pgm::{encode_pgm, GrayFrame};

/// Contact sheet of every frame's channel 0, each min-max scaled to 0..=255,
/// laid out row-major on a `ceil(√t)`-column grid.
pub fn preview_sheet(video: &LatentVideo) -> GrayFrame {
    let t = video.frames();
    let (h, w) = video.frame_shape();
    let cols = (t as f64).sqrt().ceil() as usize;
    let rows = t.div_ceil(cols);
    let sheet_w = cols * w;
    let mut data = vec![0.0f32; rows * h * sheet_w];
    for f in 0..t {
        let plane = &video.frame_data(f)[..h * w];
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let (tr, tc) = (f / cols, f % cols);
        for r in 0..h {
            for c in 0..w {
                let v = plane[r * w + c];
                let px = if span > 0.0 { 255.0 * (v - lo) / span } else { 0.0 };
                data[(tr * h + r) * sheet_w + tc * w + c] = px.round();
            }
        }
    }
    GrayFrame::new(rows * h, sheet_w, data).expect("non-empty sheet")
}

/// [`preview_sheet`] encoded as binary PGM.
pub fn preview_pgm(video: &LatentVideo) -> Vec<u8> {
    encode_pgm(&preview_sheet(video))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sheet_layout() {
        let v = LatentVideo::new(Tensor::from_fn([5, 4, 2, 3], |i| (i % 7) as f32).unwrap()).unwrap();
        let s = preview_sheet(&v);
        assert_eq!((s.height(), s.width()), (2 * 2, 3 * 3));
        assert!(s.data().iter().all(|&p| (0.0..=255.0).contains(&p)));
        assert_eq!(s.get(3, 8), 0.0);
    }
}
