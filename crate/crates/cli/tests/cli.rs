use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compvid::attention::{channel_features, AttentionLayer, PreparedPlan};
use compvid::dataprep::pgm::save_pgm;
use compvid::dataprep::synthetic::{static_clip, translating_bowl};
use compvid::dataprep::{parse_manifest, score_manifest, verdict_lines, FlowFilterConfig, GrayFrame};
use compvid::diffusion::{generate, NoiseStream, INITIAL_NOISE_STEP, LATENT_CHANNELS};
use compvid::plan::parse_plan;
use compvid::{LatentVideo, NoiseSchedule, SamplerConfig, TextEncoder, ToyDenoiser};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn compvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compvid"))
        .args(args)
        .env_remove("COMPVID_CLIENT_URL")
        .output()
        .expect("spawn compvid")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_validate_reports_segments() {
    let out = compvid(&["plan", "validate", path_str(&fixture("cafe_plan.json"))]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("3 segments, 80 frames"), "{}", stdout(&out));
}

#[test]
fn plan_validate_rejects_bad_start_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = parse_plan(&std::fs::read_to_string(fixture("cafe_plan.json")).unwrap()).unwrap();
    plan.segments[1].start_frame = 10;
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, plan.to_json()).unwrap();
    let out = compvid(&["plan", "validate", path_str(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("multiple of 8"), "{}", stderr(&out));

    let out = compvid(&["plan", "validate", path_str(&dir.path().join("absent.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

fn small_plan(dir: &Path) -> PathBuf {
    let path = dir.join("plan.json");
    let text = r#"{"total_frames": 32, "alpha": 0.5, "segments": [
        {"start_frame": 0, "prompt": "a dolphin and a boat on the sea", "objects": [
            {"prompt": "a grey dolphin", "box": [0, 0, 0.5, 1]},
            {"prompt": "a red boat", "box": [0.5, 0, 0.5, 1]}]}]}"#;
    std::fs::write(&path, text).unwrap();
    path
}

const QUICK: [&str; 6] = ["--steps", "3", "--height", "8", "--width", "8"];

fn run_generate(plan: &Path, out: &Path, extra: &[&str]) -> Vec<u8> {
    let mut args = vec!["generate", "--plan", path_str(plan), "--out", path_str(out)];
    args.extend(QUICK);
    args.extend(extra);
    let o = compvid(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    std::fs::read(out).unwrap()
}

#[test]
fn generate_is_repeatable_and_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    let a = run_generate(&plan, &dir.path().join("a.vtlt"), &["--alpha", "1.0"]);
    let b = run_generate(&plan, &dir.path().join("b.vtlt"), &["--alpha", "1.0"]);
    assert_eq!(a, b);
    assert!(dir.path().join("a.pgm").exists());

    let lib_plan = parse_plan(&std::fs::read_to_string(&plan).unwrap()).unwrap().with_alpha(1.0).unwrap();
    let sched = NoiseSchedule::default();
    let model = ToyDenoiser::seeded(0, &sched).unwrap();
    let cfg = SamplerConfig {
        ddim_steps: 3,
        latent_size: (8, 8),
        ..Default::default()
    };
    let lib = generate(&lib_plan, &cfg, &sched, &model, None).unwrap();
    assert_eq!(a, lib.to_bytes());
}

#[test]
fn chunked_generate_covers_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ar.vtlt");
    run_generate(&small_plan(dir.path()), &out, &["--chunk-frames", "16"]);
    let video = LatentVideo::load(&out).unwrap();
    assert_eq!(video.tensor().shape(), &[32, 4, 8, 8]);
}

fn write_clip(dir: &Path, id: &str, frames: &[GrayFrame]) -> String {
    let names: Vec<String> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let name = format!("{id}_{i}.pgm");
            save_pgm(f, dir.join(&name)).unwrap();
            format!("\"{name}\"")
        })
        .collect();
    format!("{{\"id\": \"{id}\", \"frames\": [{}], \"caption\": \"clip {id}\"}}\n", names.join(", "))
}

fn run_filter(manifest: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["filter", "--manifest", path_str(manifest)];
    args.extend(extra);
    compvid(&args)
}

#[test]
fn filter_matches_the_library_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = write_clip(dir.path(), "still", &static_clip(16, 16, 3));
    text += &write_clip(dir.path(), "drift", &translating_bowl(16, 16, 3, 0.5));
    text += &write_clip(dir.path(), "jump", &translating_bowl(16, 16, 3, 0.9));
    let manifest = dir.path().join("clips.jsonl");
    std::fs::write(&manifest, &text).unwrap();

    let out = run_filter(&manifest, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let entries = parse_manifest(&text).unwrap();
    let verdicts = score_manifest(&entries, dir.path(), &FlowFilterConfig::default()).unwrap();
    assert_eq!(stdout(&out), verdict_lines(&entries, &verdicts).unwrap());
    assert!(stderr(&out).contains("kept 1 of 3 clips"), "{}", stderr(&out));

    let written = dir.path().join("verdicts.jsonl");
    let out = run_filter(&manifest, &["--s1", "0", "--s2", "1e9", "--out", path_str(&written)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("kept 3 of 3 clips"), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&written).unwrap().lines().count(), 3);
}

#[test]
fn filter_drops_static_clips_and_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("clips.jsonl");
    std::fs::write(&manifest, write_clip(dir.path(), "still", &static_clip(16, 16, 4))).unwrap();
    let out = run_filter(&manifest, &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("kept 0 of 1 clips (1 below_s1"), "{}", stderr(&out));

    std::fs::write(&manifest, "{\"id\": \"a\", \"frames\": [], \"caption\": \"x\"}\n{\"id\": 3}\n").unwrap();
    let out = run_filter(&manifest, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn decompose_replays_a_fixture_into_a_plan() {
    let out = compvid(&[
        "decompose",
        "--story-file",
        path_str(&fixture("cafe_story.txt")),
        "--frames",
        "80",
        "--fixture",
        path_str(&fixture("cafe_responses.json")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let plan = parse_plan(&stdout(&out)).unwrap();
    let starts: Vec<usize> = plan.segments.iter().map(|s| s.start_frame).collect();
    assert_eq!(starts, [0, 32, 64]);
    let expected = parse_plan(&std::fs::read_to_string(fixture("cafe_plan.json")).unwrap()).unwrap();
    let boxes = |p: &compvid::PromptPlan| -> Vec<_> {
        p.segments.iter().map(|s| s.sub_objects.iter().map(|o| o.bbox).collect::<Vec<_>>()).collect()
    };
    assert_eq!(boxes(&plan)[1], boxes(&expected)[1]);
}

#[test]
fn unreachable_client_is_a_client_error() {
    let out = compvid(&[
        "decompose",
        "--story",
        "a cat sleeps",
        "--frames",
        "16",
        "--client-url",
        "http://127.0.0.1:1/complete",
        "--attempts",
        "2",
        "--timeout-secs",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
}

#[test]
fn attn_dump_matches_the_library_trace() {
    let dir = tempfile::tempdir().unwrap();
    let plan_path = fixture("cafe_plan.json");
    let out_dir = dir.path().join("dump");
    let out = compvid(&[
        "attn-dump",
        "--plan",
        path_str(&plan_path),
        "--out-dir",
        path_str(&out_dir),
        "--frame",
        "40",
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let plan = parse_plan(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    let latent = NoiseStream::new(7).gaussian(0, INITIAL_NOISE_STEP, 80, 16, 16);
    let text = TextEncoder::new(64, 0);
    let layer = AttentionLayer::seeded(LATENT_CHANNELS, 64, 16, 0);
    let prepared = PreparedPlan::new(&plan, &text, (16, 16)).unwrap();
    let q = layer.query(&channel_features(&latent.frame(40).unwrap()).unwrap(), (16, 16)).unwrap();
    let trace = prepared.trace_frame(40, &q, &layer).unwrap();
    assert_eq!(trace.parts.len(), 3);
    let read = |name: &str| std::fs::read(out_dir.join(name)).unwrap();
    assert_eq!(read("original.vtlt"), trace.original.to_bytes());
    assert_eq!(read("part_2.vtlt"), trace.parts[2].to_bytes());
    assert_eq!(read("region.vtlt"), trace.region.to_bytes());
    assert_eq!(read("blended.vtlt"), trace.blended.to_bytes());
}
