//! `eve` — zero-shot text-driven video editing from the command line.
//!
//! Exit status: 0 success, 2 configuration error, 3 backend/client error,
//! 4 I/O error.

mod overlay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eve_core::ablation::{self, AblationContext};
use eve_core::dataset::{self, DatasetConfig, Decision};
use eve_core::error::ErrorKind;
use eve_core::metrics::{ImageEmbedder, LumaScorer, MetricsReport, PromptScorer, ScorerKind, ToyClip};
use eve_core::synthetic::Fixture;
use eve_core::pipeline::{self, write_atomically, EditConfig, Editor};
use eve_core::video;
use serde::{Deserialize, Serialize};

use overlay::{parse_switch, ConfigError};

#[derive(Parser)]
#[command(name = "eve", version, about = "Zero-shot text-driven video editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit a video towards a prompt.
    Edit(WithConfig<EditFlags>),
    /// Invert a video and replay the trajectory without a prompt.
    Invert(WithConfig<EditFlags>),
    /// Score a directory of frames for temporal and prompt consistency.
    Eval(WithConfig<EvalFlags>),
    /// Caption clips and derive per-category edit prompts into a manifest.
    DatasetBuild(WithConfig<DatasetFlags>),
    /// Show a manifest record and optionally record a review decision.
    DatasetReview(WithConfig<ReviewFlags>),
    /// Run an ablation grid, one result directory per configuration.
    Ablate(WithConfig<AblateFlags>),
}

#[derive(Args)]
struct WithConfig<T: Args> {
    /// Flat TOML file whose keys mirror the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: T,
}

#[derive(Args, Serialize, Default)]
struct EditFlags {
    /// Video file or directory of numbered frames.
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Frames sampled uniformly from the clip.
    #[arg(long)]
    frames: Option<usize>,
    /// Square working resolution in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Latent optimization learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = ["sa", "faa", "sca"])]
    attn: Option<String>,
    /// Depth map guidance (on/off).
    #[arg(long, value_parser = parse_switch)]
    dmg: Option<bool>,
    #[arg(long, value_parser = ["toy", "pretrained"])]
    backend: Option<String>,
    /// Weight bundle for the pretrained backend.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed of the toy backend's frozen weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, value_parser = ["stub", "http"])]
    depth: Option<String>,
    /// Depth service endpoint (token from EVE_DEPTH_TOKEN).
    #[arg(long)]
    depth_url: Option<String>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long, value_parser = ["linear", "scaled-linear"])]
    beta_schedule: Option<String>,
    #[arg(long, value_parser = ["analytic", "numeric-check"])]
    gradient: Option<String>,
}

#[derive(Args, Serialize, Default)]
struct AblateFlags {
    #[command(flatten)]
    #[serde(flatten)]
    edit: EditFlags,
    /// Grid to run.
    #[arg(long)]
    grid: Option<String>,
    /// Configurations run concurrently.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["toy", "stub"])]
    embedder: Option<String>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateExtras {
    grid: String,
    workers: usize,
    embedder: ScorerKind,
}

impl Default for AblateExtras {
    fn default() -> Self {
        Self {
            grid: "table1".into(),
            workers: 1,
            embedder: ScorerKind::Toy,
        }
    }
}

#[derive(Args, Serialize, Default)]
struct EvalFlags {
    /// Directory of numbered frames.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Compute temporal consistency.
    #[arg(long, num_args = 0..=1, default_missing_value = "on", value_parser = parse_switch)]
    tc: Option<bool>,
    /// Compute prompt consistency (needs --prompt).
    #[arg(long, num_args = 0..=1, default_missing_value = "on", value_parser = parse_switch)]
    pc: Option<bool>,
    #[arg(long, value_parser = ["toy", "stub"])]
    embedder: Option<String>,
    /// Output directory for report.json (and pairs.csv).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write per-pair similarities as CSV.
    #[arg(long, num_args = 0..=1, default_missing_value = "on", value_parser = parse_switch)]
    csv: Option<bool>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    input: PathBuf,
    prompt: Option<String>,
    tc: bool,
    pc: bool,
    embedder: ScorerKind,
    output: PathBuf,
    csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            prompt: None,
            tc: true,
            pc: false,
            embedder: ScorerKind::Toy,
            output: PathBuf::from("eve-eval"),
            csv: false,
        }
    }
}

#[derive(Args, Serialize, Default)]
struct DatasetFlags {
    /// Directory with one video file or frame directory per clip.
    #[arg(long)]
    videos: Option<PathBuf>,
    /// Manifest to write (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = ["davis", "footage", "local"])]
    source: Option<String>,
    /// Caption candidates requested per clip.
    #[arg(long)]
    candidates: Option<usize>,
    /// Clips processed concurrently.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Use the offline stub clients.
    #[arg(long, num_args = 0..=1, default_missing_value = "on", value_parser = parse_switch)]
    stub: Option<bool>,
    /// Captioning service (falls back to EVE_CAPTION_URL).
    #[arg(long)]
    caption_url: Option<String>,
    /// Language model service (falls back to EVE_LLM_URL).
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long)]
    timeout_secs: Option<u64>,
}

#[derive(Args, Serialize, Default)]
struct ReviewFlags {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    video_id: Option<String>,
    /// Directory the clips live in, to locate the first frame.
    #[arg(long)]
    videos: Option<PathBuf>,
    #[arg(long, value_parser = ["approve", "reject"])]
    decision: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewConfig {
    manifest: PathBuf,
    video_id: String,
    videos: Option<PathBuf>,
    decision: Option<String>,
}

fn settings<T: Args + Serialize>(args: &WithConfig<T>) -> anyhow::Result<toml::Table> {
    let mut table = overlay::load(args.config.as_deref())?;
    overlay::apply(&mut table, &args.flags)?;
    Ok(table)
}

fn require_input(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.as_os_str().is_empty() {
        return Err(ConfigError(format!("missing `{what}`")).into());
    }
    Ok(())
}

fn run_edit(args: &WithConfig<EditFlags>) -> anyhow::Result<()> {
    let cfg: EditConfig = overlay::resolve(settings(args)?)?;
    require_input(&cfg.video, "video")?;
    let result = pipeline::edit(&cfg)?;
    pipeline::write_result(&result, &cfg.output)?;
    log::info!(
        "{} frames, {} inversion + {} denoising evaluations, {:.2}s",
        result.frames.len(),
        result.counts.inversion,
        result.counts.denoising,
        result.timings.total
    );
    println!("{}", cfg.output.display());
    Ok(())
}

fn run_invert(args: &WithConfig<EditFlags>) -> anyhow::Result<()> {
    let cfg: EditConfig = overlay::resolve(settings(args)?)?;
    require_input(&cfg.video, "video")?;
    let rec = pipeline::invert_video(&cfg)?;
    pipeline::write_inversion(&rec, &cfg, &cfg.output)?;
    println!("{}\trelative_error={:.6}", cfg.output.display(), rec.relative_error);
    Ok(())
}

fn scorers(kind: ScorerKind) -> (ToyClip, Box<dyn PromptScorer>) {
    match kind {
        ScorerKind::Toy => (ToyClip::default(), Box::new(ToyClip::default())),
        ScorerKind::Stub => (ToyClip::default(), Box::new(LumaScorer)),
    }
}

fn run_eval(args: &WithConfig<EvalFlags>) -> anyhow::Result<()> {
    let cfg: EvalConfig = overlay::resolve(settings(args)?)?;
    require_input(&cfg.input, "input")?;
    let prompt = cfg.prompt.as_deref().filter(|p| !p.trim().is_empty());
    if cfg.pc && prompt.is_none() {
        return Err(ConfigError("prompt consistency requested without a prompt".into()).into());
    }
    let frames = video::load_frames(&cfg.input)?;
    let (embedder, scorer) = scorers(cfg.embedder);
    let mut report = MetricsReport::evaluate(
        &frames,
        if cfg.pc { prompt } else { None },
        &embedder as &dyn ImageEmbedder,
        scorer.as_ref(),
    )?;
    if !cfg.tc {
        report.temporal_consistency = None;
        report.pairs.clear();
    } else if report.temporal_consistency.is_none() {
        return Err(ConfigError(format!("temporal consistency needs at least 2 frames, found {}", frames.len())).into());
    }
    write_atomically(&cfg.output, |dir| {
        let path = dir.join("report.json");
        std::fs::write(&path, report.to_json()).map_err(|e| eve_core::Error::io(&path, e))?;
        if cfg.csv {
            let path = dir.join("pairs.csv");
            std::fs::write(&path, report.pairs_csv()).map_err(|e| eve_core::Error::io(&path, e))?;
        }
        Ok(())
    })?;
    if let Some(tc) = report.temporal_consistency {
        println!("TC\t{tc:.2}");
    }
    if let Some(pc) = report.prompt_consistency {
        println!("PC\t{pc:.2}");
    }
    Ok(())
}

fn run_dataset_build(args: &WithConfig<DatasetFlags>) -> anyhow::Result<()> {
    let cfg: DatasetConfig = overlay::resolve(settings(args)?)?;
    require_input(&cfg.videos, "videos")?;
    cfg.validate()?;
    let (captioner, writer) = cfg.clients()?;
    let entries = dataset::discover_videos(&cfg.videos)?;
    if entries.is_empty() {
        return Err(ConfigError(format!("no clips found in {}", cfg.videos.display())).into());
    }
    let report = dataset::build_dataset(&entries, &cfg, captioner.as_ref(), writer.as_ref())?;
    dataset::write_manifest(&report.records, &cfg.manifest)?;
    println!("{}\t{} records", cfg.manifest.display(), report.records.len());
    if let Some((id, err)) = report.failures.into_iter().next() {
        return Err(anyhow::Error::new(err).context(format!("record `{id}` was not written")));
    }
    Ok(())
}

fn run_dataset_review(args: &WithConfig<ReviewFlags>) -> anyhow::Result<()> {
    let cfg: ReviewConfig = overlay::resolve(settings(args)?)?;
    let decision = match cfg.decision.as_deref() {
        None => None,
        Some("approve") => Some(Decision::Approve),
        Some("reject") => Some(Decision::Reject),
        Some(other) => return Err(ConfigError(format!("unknown decision `{other}`")).into()),
    };
    let record = match decision {
        Some(d) => dataset::record_decision(&cfg.manifest, &cfg.video_id, d)?,
        None => dataset::read_manifest(&cfg.manifest)?
            .into_iter()
            .find(|r| r.video_id == cfg.video_id)
            .ok_or_else(|| ConfigError(format!("no record for `{}`", cfg.video_id)))?,
    };
    let frame = cfg.videos.as_deref().and_then(|root| {
        dataset::discover_videos(root)
            .ok()?
            .into_iter()
            .find(|e| e.video_id == record.video_id)
            .and_then(|e| dataset::first_frame_path(&e))
    });
    print!("{}", dataset::describe(&record, frame.as_deref()));
    Ok(())
}

fn run_ablate(args: &WithConfig<AblateFlags>) -> anyhow::Result<()> {
    let mut table = settings(args)?;
    let extras: AblateExtras = overlay::resolve(overlay::split(&mut table, &["grid", "workers", "embedder"]))?;
    let base: EditConfig = overlay::resolve(table)?;
    base.validate()?;
    let runs = ablation::grid(&extras.grid)?;
    let backend = base.load_backend()?;
    let depth = base.depth_estimator()?;
    // Without a video the grid runs on a built-in synthetic clip.
    let frames = if base.video.as_os_str().is_empty() {
        log::info!("no video given; using the synthetic moving-square clip");
        Fixture::MovingSquare.clip(base.frames, base.resolution)
    } else {
        video::sample_frames(&base.video, base.frames, base.resolution)?
    };
    Editor {
        backend: backend.as_ref(),
        depth: depth.as_ref(),
    }
    .check_resolution(&frames)?;
    let (embedder, scorer) = scorers(extras.embedder);
    let ctx = AblationContext {
        backend: backend.as_ref(),
        depth: depth.as_ref(),
        embedder: &embedder,
        scorer: scorer.as_ref(),
    };
    let summary = ablation::run_grid(&ctx, &frames, &base, &runs, &extras.grid, &base.output, extras.workers)?;
    print!("{}", summary.csv());
    Ok(())
}

/// Joins an error chain, skipping causes a parent message already embeds.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Maps an error chain to the documented exit status.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<eve_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Backend => 3,
                ErrorKind::Io => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Edit(a) => run_edit(a),
        Command::Invert(a) => run_invert(a),
        Command::Eval(a) => run_eval(a),
        Command::DatasetBuild(a) => run_dataset_build(a),
        Command::DatasetReview(a) => run_dataset_review(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
