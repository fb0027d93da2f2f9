//! The depth-guidance × attention-mode ablation grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::backend::Backend;
use crate::depth::DepthEstimator;
use crate::error::{Error, Result, Stage, StageExt};
use crate::metrics::{ImageEmbedder, MetricsReport, PromptScorer};
use crate::pipeline::{write_result_with, EditConfig, Editor};
use crate::video::Frame;

/// One cell of the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRun {
    /// Result directory name.
    pub name: String,
    /// Table rows this configuration reproduces; empty for the completing cell.
    pub rows: Vec<String>,
    pub dmg: bool,
    pub attn: AttentionMode,
}

impl AblationRun {
    pub fn apply(&self, base: &EditConfig, root: &Path) -> EditConfig {
        EditConfig {
            dmg: self.dmg,
            attn: self.attn,
            output: root.join(&self.name),
            ..base.clone()
        }
    }
}

/// Depth guidance on/off × {SA, SCA, FAA}.
///
/// Rows B1–B5 cover five cells and A2 is the full method, which is the same
/// configuration as B5. The sixth cell (no depth, SCA) has no row but
/// completes the grid.
pub fn table1() -> Vec<AblationRun> {
    let run = |dmg: bool, attn: AttentionMode, rows: &[&str]| AblationRun {
        name: format!("dmg-{}_{}", if dmg { "on" } else { "off" }, attn),
        rows: rows.iter().map(|r| r.to_string()).collect(),
        dmg,
        attn,
    };
    vec![
        run(false, AttentionMode::Sa, &["B1"]),
        run(false, AttentionMode::Faa, &["B2"]),
        run(false, AttentionMode::Sca, &[]),
        run(true, AttentionMode::Sa, &["B3"]),
        run(true, AttentionMode::Sca, &["B4"]),
        run(true, AttentionMode::Faa, &["B5", "A2"]),
    ]
}

pub fn grid(name: &str) -> Result<Vec<AblationRun>> {
    match name {
        "table1" => Ok(table1()),
        other => Err(Error::Config(format!("unknown grid `{other}` (available: table1)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: AblationRun,
    pub directory: PathBuf,
    pub temporal_consistency: Option<f64>,
    pub prompt_consistency: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub schema_version: u32,
    pub grid: String,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn csv(&self) -> String {
        let mut out = String::from("name,rows,dmg,attn,tc,pc,seconds\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.run.name,
                r.run.rows.join("+"),
                r.run.dmg,
                r.run.attn,
                opt(r.temporal_consistency),
                opt(r.prompt_consistency),
                r.seconds
            ));
        }
        out
    }
}

pub struct AblationContext<'a> {
    pub backend: &'a dyn Backend,
    pub depth: &'a dyn DepthEstimator,
    pub embedder: &'a dyn ImageEmbedder,
    pub scorer: &'a dyn PromptScorer,
}

/// Runs every cell on the same frames with up to `workers` cells at once.
///
/// Each cell writes a complete result directory (frames, `result.json`,
/// `trace.csv`, `metrics.json`) under `root`; `summary.json` and
/// `summary.csv` land in `root` last.
pub fn run_grid(
    ctx: &AblationContext<'_>,
    frames: &[Frame],
    base: &EditConfig,
    runs: &[AblationRun],
    grid_name: &str,
    root: &Path,
    workers: usize,
) -> Result<AblationSummary> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| {
        use rayon::prelude::*;
        runs.par_iter()
            .map(|run| {
                let cfg = run.apply(base, root);
                log::info!("ablation cell {} ({})", run.name, run.rows.join("+"));
                let editor = Editor {
                    backend: ctx.backend,
                    depth: ctx.depth,
                };
                let result = editor.edit_frames(frames, &cfg)?;
                let prompt = (!cfg.prompt.trim().is_empty()).then_some(cfg.prompt.as_str());
                let metrics = MetricsReport::evaluate(&result.frames, prompt, ctx.embedder, ctx.scorer)?;
                write_result_with(&result, &cfg.output, &[("metrics.json", metrics.to_json())])?;
                Ok(AblationRow {
                    run: run.clone(),
                    directory: cfg.output.clone(),
                    temporal_consistency: metrics.temporal_consistency,
                    prompt_consistency: metrics.prompt_consistency,
                    seconds: result.timings.total,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = AblationSummary {
        schema_version: 1,
        grid: grid_name.to_string(),
        rows,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Backend(e.to_string()))?;
    for (name, body) in [("summary.json", json), ("summary.csv", summary.csv())] {
        let path = root.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e)).stage(Stage::Output)?;
    }
    Ok(summary)
}
