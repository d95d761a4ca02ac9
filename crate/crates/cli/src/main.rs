//! `compvid` command-line tool.
//!
//! Exit codes: 0 success, 2 validation, 3 I/O, 4 generation, 5 client.

mod http;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use compvid::attention::{channel_features, AttentionLayer, BlendMode, PreparedPlan};
use compvid::client::{FixtureClient, RetryClient, TextClient};
use compvid::dataprep::{parse_manifest, score_manifest, verdict_lines, FlowFilterConfig, VerdictReason};
use compvid::diffusion::{
    generate, generate_autoregressive, preview_pgm, AutoregressiveOptions, BetaSpacing, NoiseStream,
    DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS, INITIAL_NOISE_STEP,
};
use compvid::plan::parse_plan_with_warnings;
use compvid::templates::decompose;
use compvid::{Error, LatentVideo, NoiseSchedule, PromptPlan, SamplerConfig, TextEncoder, ToyDenoiser};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_GENERATION: u8 = 4;
const EXIT_CLIENT: u8 = 5;

/// Environment variable that overrides `--client-url`.
const CLIENT_URL_ENV: &str = "COMPVID_CLIENT_URL";

#[derive(Parser)]
#[command(name = "compvid", version, about = "Compositional toy video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan file operations.
    Plan {
        #[command(subcommand)]
        action: PlanAction,
    },
    /// Sample a latent video for a plan.
    Generate(GenerateArgs),
    /// Score clips in a manifest by optical flow and keep those in range.
    Filter(FilterArgs),
    /// Turn a story into a plan through a text-generation client.
    Decompose(DecomposeArgs),
    /// Export one frame's attention intermediates as tensor files.
    AttnDump(AttnDumpArgs),
}

#[derive(Subcommand)]
enum PlanAction {
    /// Check a plan file and print a summary.
    Validate { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Linear,
    ScaledLinear,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Contact sheet path; defaults to the output path with a .pgm extension.
    #[arg(long)]
    preview: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long, default_value_t = compvid::diffusion::DEFAULT_DDIM_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = compvid::diffusion::DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = compvid::diffusion::DEFAULT_GUIDANCE_SCALE)]
    guidance: f64,
    /// Override the plan's blend weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Generate in chunks of this many frames, each conditioned on the last.
    #[arg(long)]
    chunk_frames: Option<usize>,
    /// Disable reference conditioning between chunks.
    #[arg(long)]
    no_refs: bool,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value_t = Schedule::Linear)]
    schedule: Schedule,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Verdict file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = compvid::dataprep::DEFAULT_S1)]
    s1: f64,
    #[arg(long, default_value_t = compvid::dataprep::DEFAULT_S2)]
    s2: f64,
    /// Score raw pixel displacement instead of width fractions.
    #[arg(long)]
    no_normalize: bool,
    /// Directory relative frame paths resolve against; defaults to the
    /// manifest's directory.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long, conflicts_with = "story_file", required_unless_present = "story_file")]
    story: Option<String>,
    #[arg(long)]
    story_file: Option<PathBuf>,
    #[arg(long)]
    frames: usize,
    /// Plan output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recorded responses (`{"responses": [...]}`) replayed in order.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Completion endpoint; COMPVID_CLIENT_URL takes precedence.
    #[arg(long)]
    client_url: Option<String>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    attempts: usize,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Latent video to read queries from; seeded noise when absent.
    #[arg(long)]
    latent: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    layer_seed: u64,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Use original attention on cells no sub-object covers.
    #[arg(long)]
    renormalize: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Maps a library error, using `code` for anything not I/O or client.
    fn from_error(e: Error, code: u8) -> Self {
        match e {
            Error::Io(_) => Self::new(EXIT_IO, e.to_string()),
            Error::ClientResponse { ref raw, .. } => {
                log::error!("raw client response:\n{raw}");
                Self::new(EXIT_CLIENT, e.to_string())
            }
            Error::Transport { .. } => Self::new(EXIT_CLIENT, e.to_string()),
            _ => Self::new(code, e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load_plan(path: &Path) -> Result<PromptPlan, Failure> {
    let (plan, warnings) =
        parse_plan_with_warnings(&read(path)?).map_err(|e| Failure::from_error(e, EXIT_VALIDATION))?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(plan)
}

fn plan_validate(path: &Path) -> CmdResult {
    let plan = load_plan(path)?;
    println!("{}", plan.summary());
    for seg in &plan.segments {
        let names: Vec<&str> = seg.sub_objects.iter().map(|o| o.prompt.as_str()).collect();
        println!(
            "  frame {}: {} object{} ({})",
            seg.start_frame,
            names.len(),
            if names.len() == 1 { "" } else { "s" },
            names.join(", ")
        );
    }
    Ok(())
}

fn run_generate(a: &GenerateArgs) -> CmdResult {
    let mut plan = load_plan(&a.plan)?;
    if let Some(alpha) = a.alpha {
        plan = plan.with_alpha(alpha).map_err(|e| Failure::from_error(e, EXIT_VALIDATION))?;
    }
    let spacing = match a.schedule {
        Schedule::Linear => BetaSpacing::Linear,
        Schedule::ScaledLinear => BetaSpacing::ScaledLinear,
    };
    let gen_err = |e| Failure::from_error(e, EXIT_GENERATION);
    let sched = NoiseSchedule::new(spacing, DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).map_err(gen_err)?;
    let model = ToyDenoiser::seeded(a.model_seed, &sched).map_err(gen_err)?;
    let cfg = SamplerConfig {
        ddim_steps: a.steps,
        eta: a.eta,
        guidance_scale: a.guidance,
        seed: a.seed,
        latent_size: (a.height, a.width),
        workers: a.workers,
    };
    let video = match a.chunk_frames {
        None => generate(&plan, &cfg, &sched, &model, None),
        Some(chunk_frames) => generate_autoregressive(
            &plan,
            AutoregressiveOptions {
                chunk_frames,
                use_refs: !a.no_refs,
            },
            &cfg,
            &sched,
            &model,
        ),
    }
    .map_err(gen_err)?;
    write(&a.out, &video.to_bytes())?;
    let preview = a.preview.clone().unwrap_or_else(|| a.out.with_extension("pgm"));
    write(&preview, &preview_pgm(&video))?;
    eprintln!(
        "wrote {} frames of {}x{} to {} (preview {})",
        video.frames(),
        video.height(),
        video.width(),
        a.out.display(),
        preview.display()
    );
    Ok(())
}

fn run_filter(a: &FilterArgs) -> CmdResult {
    let invalid = |e| Failure::from_error(e, EXIT_VALIDATION);
    let mut cfg = FlowFilterConfig::new(a.s1, a.s2).map_err(invalid)?;
    cfg.normalize = !a.no_normalize;
    let entries = parse_manifest(&read(&a.manifest)?).map_err(invalid)?;
    let base = a
        .base
        .clone()
        .unwrap_or_else(|| a.manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let verdicts = score_manifest(&entries, &base, &cfg).map_err(invalid)?;
    let lines = verdict_lines(&entries, &verdicts).map_err(invalid)?;
    match &a.out {
        Some(p) => write(p, lines.as_bytes())?,
        None => print!("{lines}"),
    }
    let count = |r| verdicts.iter().filter(|v| v.reason == r).count();
    eprintln!(
        "kept {} of {} clips ({} below_s1, {} above_s2)",
        count(VerdictReason::InRange),
        verdicts.len(),
        count(VerdictReason::BelowS1),
        count(VerdictReason::AboveS2)
    );
    Ok(())
}

fn client_for(a: &DecomposeArgs) -> Result<Box<dyn TextClient>, Failure> {
    if let Some(path) = &a.fixture {
        let fixture = FixtureClient::from_json(&read(path)?).map_err(|e| Failure::from_error(e, EXIT_VALIDATION))?;
        return Ok(Box::new(fixture));
    }
    let url = std::env::var(CLIENT_URL_ENV).ok().or_else(|| a.client_url.clone());
    match url {
        Some(url) => Ok(Box::new(RetryClient::new(
            http::HttpClient::new(url, Duration::from_secs(a.timeout_secs)),
            a.attempts,
        ))),
        None => Err(Failure::new(
            EXIT_VALIDATION,
            format!("no client: pass --fixture, --client-url or set {CLIENT_URL_ENV}"),
        )),
    }
}

fn run_decompose(a: &DecomposeArgs) -> CmdResult {
    let story = match (&a.story, &a.story_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => read(p)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let client = client_for(a)?;
    let plan = decompose(&story, a.frames, &client).map_err(|e| Failure::from_error(e, EXIT_CLIENT))?;
    match &a.out {
        Some(p) => write(p, plan.to_json().as_bytes())?,
        None => print!("{}", plan.to_json()),
    }
    eprintln!("planned {}", plan.summary());
    Ok(())
}

fn run_attn_dump(a: &AttnDumpArgs) -> CmdResult {
    let plan = load_plan(&a.plan)?;
    let bad = |e| Failure::from_error(e, EXIT_VALIDATION);
    let latent = match &a.latent {
        Some(p) => LatentVideo::load(p).map_err(bad)?,
        None => NoiseStream::new(a.seed).gaussian(0, INITIAL_NOISE_STEP, plan.total_frames, a.height, a.width),
    };
    let text = TextEncoder::new(64, 0);
    let mode = if a.renormalize {
        BlendMode::CoverageRenormalized
    } else {
        BlendMode::Literal
    };
    let layer = AttentionLayer::seeded(compvid::diffusion::LATENT_CHANNELS, text.dim(), a.d, a.layer_seed)
        .with_blend_mode(mode);
    let res = latent.frame_shape();
    let prepared = PreparedPlan::new(&plan, &text, res).map_err(bad)?;
    let frame = latent.frame(a.frame).map_err(bad)?;
    let q = layer.query(&channel_features(&frame).map_err(bad)?, res).map_err(bad)?;
    let trace = prepared.trace_frame(a.frame, &q, &layer).map_err(bad)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", a.out_dir.display())))?;
    let mut files = vec![("original.vtlt".to_string(), &trace.original)];
    files.extend(trace.parts.iter().enumerate().map(|(j, p)| (format!("part_{j}.vtlt"), p)));
    files.push(("region.vtlt".into(), &trace.region));
    files.push(("blended.vtlt".into(), &trace.blended));
    for (name, t) in files {
        let path = a.out_dir.join(&name);
        write(&path, &t.to_bytes())?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan {
            action: PlanAction::Validate { path },
        } => plan_validate(path),
        Command::Generate(a) => run_generate(a),
        Command::Filter(a) => run_filter(a),
        Command::Decompose(a) => run_decompose(a),
        Command::AttnDump(a) => run_attn_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
