mod common;

use common::{bits, rng, uniform};
use compvid::dataprep::pgm::decode_pgm;
use compvid::diffusion::{
    chunk_references, generate, generate_autoregressive, preview_pgm, sample_chunk, AutoregressiveOptions,
    Branch, NoisePredictor, NoiseStream, TrueNoiseOracle,
};
use compvid::plan::{rasterize_mask, BBox, PromptPlan, SubObject, TemporalSegment};
use compvid::{Error, LatentVideo, NoiseSchedule, SamplerConfig, ToyDenoiser};

fn two_objects(start: usize, global: &str, left: &str, right: &str) -> TemporalSegment {
    TemporalSegment::new(
        start,
        global,
        vec![
            SubObject::new(left, BBox::new(0.0, 0.0, 0.5, 1.0)),
            SubObject::new(right, BBox::new(0.5, 0.25, 0.5, 0.75)),
        ],
    )
}

fn model() -> (ToyDenoiser, NoiseSchedule) {
    let sched = NoiseSchedule::default();
    (ToyDenoiser::seeded(1, &sched).unwrap(), sched)
}

fn quick(seed: u64, steps: usize) -> SamplerConfig {
    SamplerConfig {
        ddim_steps: steps,
        latent_size: (8, 8),
        seed,
        ..Default::default()
    }
}

fn latent(frames: usize, h: usize, w: usize, seed: u64) -> LatentVideo {
    LatentVideo::new(uniform(&mut rng(seed), &[frames, 4, h, w])).unwrap()
}

#[test]
fn denoise_is_deterministic_and_shape_preserving() {
    let (m, _) = model();
    let plan = PromptPlan::new(16, 0.5, vec![two_objects(0, "a cat and a dog", "a cat", "a dog")]).unwrap();
    let x = latent(16, 16, 16, 3);
    let a = m.denoise(&x, 500, &plan, None).unwrap();
    let b = m.denoise(&x, 500, &plan, None).unwrap();
    assert_eq!(a.tensor().shape(), &[16, 4, 16, 16]);
    assert_eq!(bits(a.tensor()), bits(b.tensor()));
}

#[test]
fn denoise_rejects_plan_frame_mismatch() {
    let (m, _) = model();
    let plan = PromptPlan::single(8, "a tree").unwrap();
    assert!(matches!(
        m.denoise(&latent(16, 8, 8, 0), 10, &plan, None),
        Err(Error::Validation { .. })
    ));
}

#[test]
fn second_segment_only_changes_its_frames() {
    let (m, _) = model();
    let plan = PromptPlan::new(
        16,
        0.5,
        vec![
            two_objects(0, "a cat and a dog", "a cat", "a dog"),
            two_objects(8, "a cat and a dog running", "a cat", "a dog"),
        ],
    )
    .unwrap();
    let mut other = plan.clone();
    other.segments[1] = two_objects(8, "snow falling on a lake", "a swan", "a frozen pier");
    let x = latent(16, 8, 8, 4);
    let a = m.denoise(&x, 300, &plan, None).unwrap();
    let b = m.denoise(&x, 300, &other, None).unwrap();
    for f in 0..16 {
        let same = a.frame_data(f) == b.frame_data(f);
        assert_eq!(same, f < 8, "frame {f}");
    }
}

#[test]
fn references_only_change_their_region() {
    let (m, _) = model();
    let plan = PromptPlan::new(8, 0.5, vec![two_objects(0, "a boat at sea", "a red boat", "a gull")]).unwrap();
    let previous = latent(8, 8, 8, 9);
    let refs = chunk_references(&previous, &plan, 0, m.reference_encoder()).unwrap();
    assert_eq!(refs.len(), 2);
    assert_eq!(refs[0].label(), Some("a red boat"));
    assert_eq!(refs[1].object_mask(), &rasterize_mask(&BBox::new(0.5, 0.25, 0.5, 0.75), 8, 8));
    assert_eq!(refs[0].frame_span(), (6, 2));

    let x = latent(8, 8, 8, 10);
    let with = m.denoise(&x, 400, &plan, Some(&refs)).unwrap();
    let without = m.denoise(&x, 400, &plan, None).unwrap();
    let cond = m.prepare(&plan, Some(&refs), Branch::Conditional, (8, 8)).unwrap();
    let mut changed = 0;
    for f in 0..8 {
        let region = cond.reference_region(f);
        for c in 0..4 {
            for p in 0..64 {
                let i = c * 64 + p;
                let (a, b) = (with.frame_data(f)[i], without.frame_data(f)[i]);
                if region.values()[p] {
                    changed += usize::from(a != b);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits(), "frame {f} channel {c} cell {p}");
                }
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn ddim_round_trip_with_true_noise() {
    let sched = NoiseSchedule::default();
    let target = NoiseStream::new(4).gaussian(0, 0, 2, 8, 8);
    let oracle = TrueNoiseOracle::new(target.clone(), sched.clone());
    let plan = PromptPlan::single(2, "a kite").unwrap();
    let cfg = SamplerConfig {
        eta: 0.0,
        ..quick(2, 50)
    };
    let out = generate(&plan, &cfg, &sched, &oracle, None).unwrap();
    assert!(out.tensor().max_abs_diff(target.tensor()).unwrap() <= 1e-4);
}

#[test]
fn generate_shape_and_repeatability() {
    let (m, sched) = model();
    let plan = PromptPlan::single(16, "a lighthouse").unwrap();
    let cfg = SamplerConfig {
        latent_size: (16, 16),
        ..quick(5, 2)
    };
    let a = generate(&plan, &cfg, &sched, &m, None).unwrap();
    assert_eq!(a.tensor().shape(), &[16, 4, 16, 16]);
    let b = generate(&plan, &cfg, &sched, &m, None).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let other = generate(&plan, &cfg.clone().with_seed(6), &sched, &m, None).unwrap();
    assert_ne!(a.to_bytes(), other.to_bytes());
}

#[test]
fn one_chunk_equals_generate() {
    let (m, sched) = model();
    let plan = PromptPlan::new(16, 0.5, vec![two_objects(0, "two birds", "a crow", "a dove")]).unwrap();
    let cfg = quick(11, 4);
    let single = generate(&plan, &cfg, &sched, &m, None).unwrap();
    let chunked = generate_autoregressive(&plan, AutoregressiveOptions::new(16), &cfg, &sched, &m).unwrap();
    assert_eq!(single.to_bytes(), chunked.to_bytes());
}

#[test]
fn chunks_follow_their_predecessor() {
    let (m, sched) = model();
    let plan = PromptPlan::new(
        32,
        0.5,
        vec![
            two_objects(0, "two birds", "a crow", "a dove"),
            two_objects(8, "two birds on a wire", "a crow", "a dove"),
            two_objects(24, "a bird and a cat", "a crow", "a cat"),
        ],
    )
    .unwrap();
    let cfg = quick(12, 3);
    let out = generate_autoregressive(&plan, AutoregressiveOptions::new(16), &cfg, &sched, &m).unwrap();
    assert_eq!(out.frames(), 32);

    let first = plan.slice(0, 16).unwrap();
    let second = plan.slice(16, 16).unwrap();
    let a = sample_chunk(&first, &cfg, &sched, &m, None, 0).unwrap();
    let refs = chunk_references(&a, &first, 0, m.reference_encoder()).unwrap();
    let labels: Vec<_> = refs.iter().map(|r| r.label().unwrap()).collect();
    assert_eq!(labels, ["a crow", "a dove"]);
    let b = sample_chunk(&second, &cfg, &sched, &m, Some(&refs), 1).unwrap();
    assert_eq!(out.to_bytes(), LatentVideo::concat(&[a.clone(), b]).unwrap().to_bytes());

    let plain = generate_autoregressive(
        &plan,
        AutoregressiveOptions {
            chunk_frames: 16,
            use_refs: false,
        },
        &cfg,
        &sched,
        &m,
    )
    .unwrap();
    assert_eq!(plain.narrow(0, 16).unwrap().to_bytes(), a.to_bytes());
    assert_ne!(plain.to_bytes(), out.to_bytes());
}

#[test]
fn chunk_sizes_are_validated() {
    let (m, sched) = model();
    let plan = PromptPlan::single(32, "rain").unwrap();
    let cfg = quick(0, 1);
    for chunk in [0, 12, 24] {
        assert!(
            matches!(
                generate_autoregressive(&plan, AutoregressiveOptions::new(chunk), &cfg, &sched, &m),
                Err(Error::Validation { .. })
            ),
            "chunk {chunk}"
        );
    }
}

#[test]
fn worker_count_does_not_change_sampling() {
    let (m, sched) = model();
    let plan = PromptPlan::new(8, 0.5, vec![two_objects(0, "two birds", "a crow", "a dove")]).unwrap();
    let run = |workers| {
        let cfg = SamplerConfig {
            workers,
            ..quick(21, 3)
        };
        generate(&plan, &cfg, &sched, &m, None).unwrap().to_bytes()
    };
    assert_eq!(run(Some(1)), run(Some(3)));
}

#[test]
fn preview_sheet_is_a_valid_pgm() {
    let video = latent(3, 4, 6, 1);
    let sheet = decode_pgm(&preview_pgm(&video)).unwrap();
    assert!(sheet.width() >= 6 && sheet.height() >= 4);
    assert!(sheet.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
}
