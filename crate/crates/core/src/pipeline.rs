//! End-to-end editing: sample → encode → depth → invert → optimized
//! denoise → decode.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, PromptEmbedding};
use crate::backend::{Backend, ToyBackend, TOY_SEED};
use crate::ddim::{ddim_denoise_step, ddim_invert_step};
use crate::depth::{normalize_depth, DepthEstimator, DepthFeatures, HttpDepth, StubDepth};
use crate::error::{Error, Result, Stage, StageExt};
use crate::latent::{Latent, LatentState};
use crate::optimizer::{optimize_step, GradientMode, OptimizerConfig, TraceRow};
use crate::predictor::NoisePredictor;
use crate::schedule::{BetaSchedule, NoiseSchedule};
use crate::video::{self, Frame};

/// Version of the `result.json` layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    /// Frozen weights loaded from the bundle at `weights`.
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DepthKind {
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaKind {
    Linear,
    ScaledLinear,
}

/// Everything one edit run needs. Field names double as config-file keys
/// and command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Video file or directory of numbered frames.
    pub video: PathBuf,
    pub prompt: String,
    pub output: PathBuf,
    pub frames: usize,
    /// Side of the square working resolution.
    pub resolution: usize,
    pub steps: usize,
    pub lr: f64,
    pub attn: AttentionMode,
    /// Depth map guidance.
    pub dmg: bool,
    pub backend: BackendKind,
    pub weights: Option<PathBuf>,
    /// Seeds the toy backend's frozen weights.
    pub seed: u64,
    /// Classifier-free guidance; `None` picks the backend default.
    pub guidance: Option<f64>,
    pub depth: DepthKind,
    pub depth_url: Option<String>,
    pub train_steps: usize,
    /// `None` picks the backend default.
    pub beta_schedule: Option<BetaKind>,
    pub gradient: GradientMode,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            video: PathBuf::new(),
            prompt: String::new(),
            output: PathBuf::from("eve-out"),
            frames: 8,
            resolution: 512,
            steps: 50,
            lr: 0.8,
            attn: AttentionMode::Faa,
            dmg: true,
            backend: BackendKind::Toy,
            weights: None,
            seed: TOY_SEED,
            guidance: None,
            depth: DepthKind::Stub,
            depth_url: None,
            train_steps: 1000,
            beta_schedule: None,
            gradient: GradientMode::Analytic,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.frames == 0 {
            return fail("frames must be at least 1".into());
        }
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.steps > self.train_steps {
            return fail(format!("steps ({}) exceed train_steps ({})", self.steps, self.train_steps));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(8) {
            return fail(format!("resolution {} is not a positive multiple of 8", self.resolution));
        }
        if let Some(g) = self.guidance {
            if !g.is_finite() {
                return fail(format!("guidance must be finite, got {g}"));
            }
        }
        if self.backend == BackendKind::Pretrained && self.weights.is_none() {
            return fail("the pretrained backend needs `weights`".into());
        }
        if self.depth == DepthKind::Http && self.depth_url.is_none() {
            return fail("the http depth backend needs `depth_url`".into());
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.lr,
            gradient: self.gradient,
        }
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance.unwrap_or(match self.backend {
            BackendKind::Toy => 1.0,
            BackendKind::Pretrained => 7.5,
        })
    }

    pub fn beta(&self) -> BetaSchedule {
        let kind = self.beta_schedule.unwrap_or(match self.backend {
            BackendKind::Toy => BetaKind::Linear,
            BackendKind::Pretrained => BetaKind::ScaledLinear,
        });
        match kind {
            BetaKind::Linear => BetaSchedule::toy_default(),
            BetaKind::ScaledLinear => BetaSchedule::pretrained_default(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.train_steps, self.steps, &self.beta())
    }

    pub fn load_backend(&self) -> Result<Box<dyn Backend>> {
        match self.backend {
            BackendKind::Toy => Ok(Box::new(ToyBackend::new(self.seed)?)),
            BackendKind::Pretrained => {
                let path = self.weights.as_deref().ok_or_else(|| Error::Config("missing weights".into()))?;
                Ok(Box::new(ToyBackend::load(path)?))
            }
        }
    }

    pub fn depth_estimator(&self) -> Result<Box<dyn DepthEstimator>> {
        match self.depth {
            DepthKind::Stub => Ok(Box::new(StubDepth)),
            DepthKind::Http => Ok(Box::new(HttpDepth {
                url: self.depth_url.clone().ok_or_else(|| Error::Config("missing depth_url".into()))?,
                token: std::env::var("EVE_DEPTH_TOKEN").ok(),
                timeout: Duration::from_secs(60),
            })),
        }
    }

    /// Parses a flat TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Noise evaluations performed by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub inversion: usize,
    pub denoising: usize,
    /// Backbone forward passes, two per evaluation under guidance.
    pub backbone_passes: usize,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub encoding: f64,
    pub depth: f64,
    pub inversion: f64,
    pub denoising: f64,
    pub decoding: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Inversion,
    Denoising,
}

/// Root-mean-square of all latents after a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub phase: Phase,
    pub step: usize,
    pub rms: f64,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub config: EditConfig,
    pub backend: String,
    pub frames: Vec<Frame>,
    pub inverted: LatentState,
    pub edited: LatentState,
    pub trajectory: Vec<TrajectoryPoint>,
    pub trace: Vec<TraceRow>,
    pub counts: EvalCounts,
    pub timings: Timings,
}

fn rms(state: &LatentState) -> f64 {
    let (sum, n) = state
        .frames()
        .iter()
        .fold((0.0, 0usize), |(s, n), f| (s + f.iter().map(|v| v * v).sum::<f64>(), n + f.len()));
    (sum / n as f64).sqrt()
}

/// Maps clean latents to `Z_T`, unconditioned on text.
pub fn invert(
    z0: Vec<Latent>,
    depth: Option<&DepthFeatures>,
    predictor: &NoisePredictor<'_>,
    mut on_step: impl FnMut(&LatentState),
) -> Result<LatentState> {
    let mut z = LatentState::new(z0, 0)?;
    for step in 1..=predictor.schedule().ddim_steps() {
        let eps = predictor.predict(z.frames(), step, None, depth)?;
        z = ddim_invert_step(&z, &eps, predictor.schedule())?;
        on_step(&z);
    }
    Ok(z)
}

/// Plain DDIM denoising from `z.step()` down to 0, one evaluation per step.
pub fn denoise(
    mut z: LatentState,
    prompt: Option<&PromptEmbedding>,
    depth: Option<&DepthFeatures>,
    predictor: &NoisePredictor<'_>,
) -> Result<LatentState> {
    while z.step() > 0 {
        let eps = predictor.predict(z.frames(), z.step(), prompt, depth)?;
        z = ddim_denoise_step(&z, &eps, predictor.schedule())?;
    }
    Ok(z)
}

/// Denoising with one latent optimization per step, two evaluations per step.
pub fn denoise_optimized(
    mut z: LatentState,
    prompt: Option<&PromptEmbedding>,
    depth: Option<&DepthFeatures>,
    predictor: &NoisePredictor<'_>,
    cfg: &OptimizerConfig,
    mut on_step: impl FnMut(&LatentState, TraceRow),
) -> Result<LatentState> {
    while z.step() > 0 {
        let (next, row) = optimize_step(&z, prompt, depth, predictor, cfg)?;
        on_step(&next, row);
        z = next;
    }
    Ok(z)
}

pub fn encode_frames(backend: &dyn Backend, frames: &[Frame]) -> Result<Vec<Latent>> {
    frames.par_iter().map(|f| backend.encode_image(f)).collect()
}

pub fn decode_latents(backend: &dyn Backend, latents: &[Latent]) -> Result<Vec<Frame>> {
    latents.par_iter().map(|z| backend.decode_latent(z)).collect()
}

/// Estimates, normalizes and encodes per-frame depth.
pub fn depth_features(backend: &dyn Backend, estimator: &dyn DepthEstimator, frames: &[Frame]) -> Result<DepthFeatures> {
    let maps: Vec<_> = estimator.estimate(frames)?.iter().map(normalize_depth).collect();
    backend.encode_depth(&maps)
}

/// Runs an edit over already-sampled frames.
pub struct Editor<'a> {
    pub backend: &'a dyn Backend,
    pub depth: &'a dyn DepthEstimator,
}

impl Editor<'_> {
    pub fn check_resolution(&self, frames: &[Frame]) -> Result<()> {
        let multiple = self.backend.resolution_multiple();
        let Some(first) = frames.first() else {
            return Err(Error::Config("no frames to edit".into()));
        };
        let (_, h, w) = first.dim();
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} is not a multiple of {multiple} for backend {}",
                self.backend.name()
            )));
        }
        Ok(())
    }

    pub fn edit_frames(&self, frames: &[Frame], cfg: &EditConfig) -> Result<EditResult> {
        let total = Instant::now();
        let mut timings = Timings::default();
        cfg.validate().stage(Stage::Config)?;
        self.check_resolution(frames).stage(Stage::Config)?;
        let schedule = cfg.schedule().stage(Stage::Config)?;

        let clock = Instant::now();
        let z0 = encode_frames(self.backend, frames).stage(Stage::Encoding)?;
        timings.encoding = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let depth = if cfg.dmg {
            Some(depth_features(self.backend, self.depth, frames).stage(Stage::Depth)?)
        } else {
            None
        };
        timings.depth = clock.elapsed().as_secs_f64();

        let prompt = if cfg.prompt.trim().is_empty() {
            None
        } else {
            Some(self.backend.encode_text(&cfg.prompt).stage(Stage::Prompt)?)
        };

        let predictor = NoisePredictor::new(self.backend, &schedule, cfg.attn, cfg.guidance_scale());
        let mut trajectory = Vec::with_capacity(2 * cfg.steps);

        let clock = Instant::now();
        let inverted = invert(z0, depth.as_ref(), &predictor, |z| {
            trajectory.push(TrajectoryPoint {
                phase: Phase::Inversion,
                step: z.step(),
                rms: rms(z),
            })
        })
        .stage(Stage::Inversion)?;
        let inversion_evals = predictor.evaluations();
        timings.inversion = clock.elapsed().as_secs_f64();
        log::info!("inverted {} frames over {} steps", inverted.len(), cfg.steps);

        let clock = Instant::now();
        let mut trace = Vec::with_capacity(cfg.steps);
        let edited = denoise_optimized(
            inverted.clone(),
            prompt.as_ref(),
            depth.as_ref(),
            &predictor,
            &cfg.optimizer(),
            |z, row| {
                log::debug!("step {}: loss {:.3e} -> {:.3e}", row.step, row.loss_before, row.loss_after);
                trajectory.push(TrajectoryPoint {
                    phase: Phase::Denoising,
                    step: z.step(),
                    rms: rms(z),
                });
                trace.push(row);
            },
        )
        .stage(Stage::Denoising)?;
        timings.denoising = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let out = decode_latents(self.backend, edited.frames()).stage(Stage::Decoding)?;
        timings.decoding = clock.elapsed().as_secs_f64();
        timings.total = total.elapsed().as_secs_f64();

        Ok(EditResult {
            config: cfg.clone(),
            backend: self.backend.name().to_string(),
            frames: out,
            inverted,
            edited,
            trajectory,
            trace,
            counts: EvalCounts {
                inversion: inversion_evals,
                denoising: predictor.evaluations() - inversion_evals,
                backbone_passes: predictor.backbone_passes(),
            },
            timings,
        })
    }
}

/// Loads the backend and depth estimator named by `cfg`, samples the video
/// and edits it.
pub fn edit(cfg: &EditConfig) -> Result<EditResult> {
    cfg.validate().stage(Stage::Config)?;
    let backend = cfg.load_backend().stage(Stage::Config)?;
    let depth = cfg.depth_estimator().stage(Stage::Config)?;
    let frames = video::sample_frames(&cfg.video, cfg.frames, cfg.resolution).stage(Stage::Sampling)?;
    Editor {
        backend: backend.as_ref(),
        depth: depth.as_ref(),
    }
    .edit_frames(&frames, cfg)
}

/// Invert-then-denoise without prompt or optimization; `depth`, when given,
/// conditions both directions.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub frames: Vec<Frame>,
    pub inverted: LatentState,
    pub reconstructed: LatentState,
    /// `‖decoded − original‖ / ‖original‖` over all pixels.
    pub relative_error: f64,
    pub counts: EvalCounts,
}

pub fn reconstruct(
    backend: &dyn Backend,
    frames: &[Frame],
    schedule: &NoiseSchedule,
    mode: AttentionMode,
    depth: Option<&DepthFeatures>,
) -> Result<Reconstruction> {
    let z0 = encode_frames(backend, frames).stage(Stage::Encoding)?;
    let predictor = NoisePredictor::new(backend, schedule, mode, 1.0);
    let inverted = invert(z0, depth, &predictor, |_| {}).stage(Stage::Inversion)?;
    let inversion = predictor.evaluations();
    let reconstructed = denoise(inverted.clone(), None, depth, &predictor).stage(Stage::Denoising)?;
    let out = decode_latents(backend, reconstructed.frames()).stage(Stage::Decoding)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in out.iter().zip(frames) {
        num += (a - b).mapv(|v| v * v).sum();
        den += b.mapv(|v| v * v).sum();
    }
    Ok(Reconstruction {
        frames: out,
        inverted,
        reconstructed,
        relative_error: (num / den.max(f64::MIN_POSITIVE)).sqrt(),
        counts: EvalCounts {
            inversion,
            denoising: predictor.evaluations() - inversion,
            backbone_passes: predictor.backbone_passes(),
        },
    })
}

/// Samples the configured video, inverts it (with depth when `dmg` is on)
/// and replays the trajectory without prompt or optimization.
pub fn invert_video(cfg: &EditConfig) -> Result<Reconstruction> {
    cfg.validate().stage(Stage::Config)?;
    let backend = cfg.load_backend().stage(Stage::Config)?;
    let estimator = cfg.depth_estimator().stage(Stage::Config)?;
    let frames = video::sample_frames(&cfg.video, cfg.frames, cfg.resolution).stage(Stage::Sampling)?;
    let editor = Editor {
        backend: backend.as_ref(),
        depth: estimator.as_ref(),
    };
    editor.check_resolution(&frames).stage(Stage::Config)?;
    let schedule = cfg.schedule().stage(Stage::Config)?;
    let depth = if cfg.dmg {
        Some(depth_features(backend.as_ref(), estimator.as_ref(), &frames).stage(Stage::Depth)?)
    } else {
        None
    };
    reconstruct(backend.as_ref(), &frames, &schedule, cfg.attn, depth.as_ref())
}

#[derive(Serialize)]
struct InversionReport<'a> {
    schema_version: u32,
    config: &'a EditConfig,
    counts: EvalCounts,
    relative_error: f64,
    steps: usize,
}

/// Writes the replayed frames, `latents.json` (the inverted `Z_T`) and
/// `result.json` into `dir`.
pub fn write_inversion(rec: &Reconstruction, cfg: &EditConfig, dir: &Path) -> Result<()> {
    let report = InversionReport {
        schema_version: SCHEMA_VERSION,
        config: cfg,
        counts: rec.counts,
        relative_error: rec.relative_error,
        steps: rec.inverted.step(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Backend(e.to_string()))?;
    let latents = serde_json::to_string(rec.inverted.frames()).map_err(|e| Error::Backend(e.to_string()))?;
    write_atomically(dir, |tmp| {
        video::save_frames(&rec.frames, &tmp.join("frames"))?;
        write_file(&tmp.join("latents.json"), latents)?;
        write_file(&tmp.join("result.json"), json)
    })
    .stage(Stage::Output)
}

#[derive(Serialize)]
struct ResultReport<'a> {
    schema_version: u32,
    backend: &'a str,
    config: &'a EditConfig,
    frames: Vec<String>,
    counts: EvalCounts,
    timings: Timings,
    final_loss: Option<f64>,
    trajectory: &'a [TrajectoryPoint],
}

fn write_trace(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,loss_before,loss_after,grad_norm\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.loss_before, r.loss_after, r.grad_norm));
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `frames/NNN.png`, `result.json` and `trace.csv` into `dir`.
///
/// Files land in a sibling scratch directory that is renamed into place
/// once complete. An existing `dir` is replaced only if it holds a previous
/// `result.json`.
pub fn write_result(result: &EditResult, dir: &Path) -> Result<()> {
    write_result_with(result, dir, &[])
}

/// [`write_result`] plus extra `(file name, contents)` pairs.
pub fn write_result_with(result: &EditResult, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
    let report = ResultReport {
        schema_version: SCHEMA_VERSION,
        backend: &result.backend,
        config: &result.config,
        frames: (0..result.frames.len()).map(|i| format!("frames/{i:03}.png")).collect(),
        counts: result.counts,
        timings: result.timings,
        final_loss: result.trace.last().map(|r| r.loss_after),
        trajectory: &result.trajectory,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Backend(e.to_string()))?;
    write_atomically(dir, |tmp| {
        video::save_frames(&result.frames, &tmp.join("frames"))?;
        write_file(&tmp.join("result.json"), json)?;
        write_file(&tmp.join("trace.csv"), write_trace(&result.trace))?;
        for (name, contents) in extra {
            write_file(&tmp.join(name), contents)?;
        }
        Ok(())
    })
    .stage(Stage::Output)
}

/// Populates a scratch directory with `fill` and renames it to `dir`.
pub fn write_atomically(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a usable output directory", dir.display())))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        let empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty && !dir.join("result.json").exists() && !dir.join("report.json").exists() {
            let _ = std::fs::remove_dir_all(&tmp);
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to replace a directory eve did not write"),
            ));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth::DepthMap;
    use ndarray::Array3;

    /// Predicts zero noise everywhere.
    struct ZeroNoise(ToyBackend);

    impl Backend for ZeroNoise {
        fn name(&self) -> &str {
            "zero"
        }
        fn downscale(&self) -> usize {
            self.0.downscale()
        }
        fn latent_scale(&self) -> f64 {
            1.0
        }
        fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
            self.0.stage_shapes(h, w)
        }
        fn resolution_multiple(&self) -> usize {
            self.0.resolution_multiple()
        }
        fn encode_image(&self, frame: &Frame) -> Result<Latent> {
            self.0.encode_image(frame)
        }
        fn decode_latent(&self, latent: &Latent) -> Result<Frame> {
            self.0.decode_latent(latent)
        }
        fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding> {
            self.0.encode_text(prompt)
        }
        fn null_text(&self) -> PromptEmbedding {
            self.0.null_text()
        }
        fn encode_depth(&self, maps: &[DepthMap]) -> Result<DepthFeatures> {
            self.0.encode_depth(maps)
        }
        fn predict_noise(
            &self,
            latents: &[Latent],
            _: usize,
            _: Option<&PromptEmbedding>,
            _: Option<&DepthFeatures>,
            _: AttentionMode,
        ) -> Result<Vec<Latent>> {
            Ok(latents.iter().map(|l| Array3::zeros(l.dim())).collect())
        }
    }

    fn gradient_frames(k: usize, side: usize) -> Vec<Frame> {
        (0..k)
            .map(|i| {
                Array3::from_shape_fn((3, side, side), |(c, y, x)| {
                    ((x + 2 * i) as f64 / side as f64 * 0.6 + y as f64 / side as f64 * 0.3 + c as f64 * 0.05).fract()
                })
            })
            .collect()
    }

    fn small(frames: usize, steps: usize) -> EditConfig {
        EditConfig {
            frames,
            steps,
            resolution: 32,
            prompt: "a red car".into(),
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(EditConfig::default().validate().is_ok());
        for bad in [
            EditConfig { steps: 0, ..Default::default() },
            EditConfig { frames: 0, ..Default::default() },
            EditConfig { resolution: 100, ..Default::default() },
            EditConfig { lr: -0.1, ..Default::default() },
            EditConfig { steps: 2000, ..Default::default() },
            EditConfig { backend: BackendKind::Pretrained, ..Default::default() },
            EditConfig { depth: DepthKind::Http, ..Default::default() },
        ] {
            let err = bad.validate().unwrap_err();
            assert_eq!(err.kind(), crate::error::ErrorKind::Config, "{err}");
        }
    }

    #[test]
    fn backend_defaults() {
        let toy = EditConfig::default();
        assert_eq!(toy.guidance_scale(), 1.0);
        assert_eq!(toy.beta(), BetaSchedule::toy_default());
        let pre = EditConfig {
            backend: BackendKind::Pretrained,
            ..Default::default()
        };
        assert_eq!(pre.guidance_scale(), 7.5);
        assert_eq!(pre.beta(), BetaSchedule::pretrained_default());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = EditConfig {
            prompt: "a cat".into(),
            attn: AttentionMode::Sca,
            guidance: Some(3.0),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(EditConfig::from_toml(&text).unwrap(), cfg);
        assert!(EditConfig::from_toml("framez = 3").is_err());
        let partial = EditConfig::from_toml("frames = 4\nattn = \"sa\"\ndmg = false").unwrap();
        assert_eq!((partial.frames, partial.attn, partial.dmg, partial.steps), (4, AttentionMode::Sa, false, 50));
    }

    #[test]
    fn zero_noise_inversion_is_cumulative_scaling() {
        let backend = ZeroNoise(ToyBackend::default());
        let sched = NoiseSchedule::new(1000, 10, &BetaSchedule::toy_default()).unwrap();
        let predictor = NoisePredictor::new(&backend, &sched, AttentionMode::Faa, 1.0);
        let z0 = encode_frames(&backend, &gradient_frames(2, 32)).unwrap();
        let zt = invert(z0.clone(), None, &predictor, |_| {}).unwrap();
        let scale = sched.alpha_bar_at_step(10).unwrap().sqrt();
        for (a, b) in zt.frames().iter().zip(&z0) {
            let expected = b * scale;
            assert!(crate::latent::max_abs_diff(std::slice::from_ref(a), &[expected]) < 1e-12);
        }
        assert_eq!(predictor.evaluations(), 10);
    }

    #[test]
    fn evaluation_counts() {
        let backend = ToyBackend::default();
        let frames = gradient_frames(3, 32);
        let cfg = small(3, 4);
        let result = Editor {
            backend: &backend,
            depth: &StubDepth,
        }
        .edit_frames(&frames, &cfg)
        .unwrap();
        assert_eq!((result.counts.inversion, result.counts.denoising), (4, 8));
        assert_eq!(result.frames.len(), 3);
        assert_eq!(result.trace.len(), 4);
        assert_eq!(result.edited.step(), 0);
        assert_eq!(result.inverted.step(), 4);
        assert_eq!(result.frames[0].dim(), (3, 32, 32));

        let guided = EditConfig { guidance: Some(2.0), ..cfg };
        let result = Editor {
            backend: &backend,
            depth: &StubDepth,
        }
        .edit_frames(&frames, &guided)
        .unwrap();
        // Inversion is never text-conditioned, so only denoising doubles up.
        assert_eq!(result.counts.backbone_passes, 4 + 2 * 8);
    }

    #[test]
    fn dmg_off_matches_plain_denoising() {
        let backend = ToyBackend::default();
        let frames = gradient_frames(2, 32);
        let cfg = EditConfig { dmg: false, ..small(2, 5) };
        let result = Editor {
            backend: &backend,
            depth: &StubDepth,
        }
        .edit_frames(&frames, &cfg)
        .unwrap();
        let sched = cfg.schedule().unwrap();
        let predictor = NoisePredictor::new(&backend, &sched, cfg.attn, 1.0);
        let prompt = backend.encode_text(&cfg.prompt).unwrap();
        let plain = denoise(result.inverted.clone(), Some(&prompt), None, &predictor).unwrap();
        assert_eq!(plain, result.edited);
        assert!(result.trace.iter().all(|r| r.loss_before == 0.0 && r.grad_norm == 0.0));
    }

    #[test]
    fn edits_are_deterministic() {
        let backend = ToyBackend::default();
        let frames = gradient_frames(2, 32);
        let editor = Editor {
            backend: &backend,
            depth: &StubDepth,
        };
        let a = editor.edit_frames(&frames, &small(2, 3)).unwrap();
        let b = editor.edit_frames(&frames, &small(2, 3)).unwrap();
        assert_eq!(a.edited, b.edited);
        assert_eq!(a.inverted, b.inverted);
    }

    #[test]
    fn wrong_resolution_is_a_config_error() {
        let backend = ToyBackend::default();
        let frames = gradient_frames(1, 24);
        let err = Editor {
            backend: &backend,
            depth: &StubDepth,
        }
        .edit_frames(&frames, &small(1, 2))
        .unwrap_err();
        assert!(matches!(err, Error::Stage { stage: Stage::Config, .. }), "{err}");
    }

    #[test]
    fn output_directory_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let backend = ToyBackend::default();
        let result = Editor {
            backend: &backend,
            depth: &StubDepth,
        }
        .edit_frames(&gradient_frames(2, 32), &small(2, 2))
        .unwrap();
        let out = tmp.path().join("run");
        write_result(&result, &out).unwrap();
        assert!(out.join("frames/000.png").exists() && out.join("frames/001.png").exists());
        let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
        assert_eq!(json["schema_version"], SCHEMA_VERSION);
        assert_eq!(json["counts"]["inversion"], 2);
        assert_eq!(json["config"]["frames"], 2);
        let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 3);
        // Re-running into the same directory replaces it.
        write_result(&result, &out).unwrap();

        let foreign = tmp.path().join("foreign");
        std::fs::create_dir(&foreign).unwrap();
        std::fs::write(foreign.join("keep.txt"), "x").unwrap();
        assert!(write_result(&result, &foreign).is_err());
        assert!(foreign.join("keep.txt").exists());
    }

    #[test]
    fn failed_writes_leave_nothing_behind() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let err = write_atomically(&out, |_| Err(Error::Backend("boom".into())));
        assert!(err.is_err());
        assert!(!out.exists());
        assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
    }
}
