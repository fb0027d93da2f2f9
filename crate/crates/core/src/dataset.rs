//! Building an editing benchmark: caption each clip, derive one edit prompt
//! per category, keep everything in a JSON-lines manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{self, frame_to_png, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Object replacement.
    OR,
    /// Object attribute change.
    OA,
    /// Style transfer.
    ST,
    /// Background change.
    BC,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::OR, Category::OA, Category::ST, Category::BC];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::OR => "OR",
            Category::OA => "OA",
            Category::ST => "ST",
            Category::BC => "BC",
        }
    }

    /// Instruction sent to the language model, `{caption}` is substituted.
    pub fn template(&self) -> &'static str {
        match self {
            Category::OR => {
                "Here is a description of a video: \"{caption}\". Rewrite it so the main subject becomes a different \
                 object, keeping the rest of the scene. Reply with the rewritten description only."
            }
            Category::OA => {
                "Here is a description of a video: \"{caption}\". Rewrite it so the main subject keeps its identity but \
                 changes an attribute such as colour, material or texture. Reply with the rewritten description only."
            }
            Category::ST => {
                "Here is a description of a video: \"{caption}\". Rewrite it so the whole scene is rendered in a named \
                 artistic style, keeping its content. Reply with the rewritten description only."
            }
            Category::BC => {
                "Here is a description of a video: \"{caption}\". Rewrite it so the subject stays the same but the \
                 surroundings become a different place. Reply with the rewritten description only."
            }
        }
    }

    pub fn instruction(&self, caption: &str) -> String {
        self.template().replace("{caption}", caption)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Davis,
    Footage,
    #[default]
    Local,
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "davis" => Ok(SourceTag::Davis),
            "footage" => Ok(SourceTag::Footage),
            "local" => Ok(SourceTag::Local),
            other => Err(Error::Config(format!("unknown source tag `{other}` (davis, footage, local)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub video_id: String,
    pub source: SourceTag,
    pub caption: String,
    pub prompts: BTreeMap<Category, String>,
    pub verified: bool,
}

impl DatasetRecord {
    pub fn is_complete(&self) -> bool {
        Category::ALL
            .iter()
            .all(|c| self.prompts.get(c).is_some_and(|p| !p.trim().is_empty()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.video_id.trim().is_empty() {
            return Err(Error::Record("empty video_id".into()));
        }
        if self.verified {
            if let Some(missing) = Category::ALL
                .iter()
                .find(|c| self.prompts.get(c).is_none_or(|p| p.trim().is_empty()))
            {
                return Err(Error::Record(format!(
                    "{}: verified but the {missing} prompt is missing",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}

/// One JSON object per line, each terminated by `\n`.
pub fn to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        r.validate()?;
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Record(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a manifest; blank lines are skipped, line numbers are 1-based.
pub fn parse_jsonl(text: &str) -> Result<Vec<DatasetRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            record.validate().map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(record)
        })
        .collect()
}

/// Writes the manifest atomically; refuses if any record is invalid.
pub fn write_manifest(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let text = to_jsonl(records)?;
    let tmp = path.with_extension("jsonl.tmp");
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

/// Longest candidate by character count; ties go to the lexicographically
/// smaller string.
pub fn select_caption(candidates: &[String]) -> Result<String> {
    candidates
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .min_by(|a, b| b.chars().count().cmp(&a.chars().count()).then_with(|| a.cmp(b)))
        .map(str::to_string)
        .ok_or_else(|| Error::Client("captioner returned no candidates".into()))
}

pub trait Captioner: Send + Sync {
    fn candidates(&self, frame: &Frame, count: usize) -> Result<Vec<String>>;
}

pub trait PromptWriter: Send + Sync {
    fn rewrite(&self, category: Category, instruction: &str, caption: &str) -> Result<String>;
}

pub fn generate_caption(frame: &Frame, captioner: &dyn Captioner, count: usize) -> Result<String> {
    select_caption(&captioner.candidates(frame, count)?)
}

pub fn generate_prompts(caption: &str, writer: &dyn PromptWriter) -> Result<BTreeMap<Category, String>> {
    if caption.trim().is_empty() {
        return Err(Error::Record("empty caption".into()));
    }
    Category::ALL
        .iter()
        .map(|&c| {
            let prompt = writer.rewrite(c, &c.instruction(caption), caption)?;
            let prompt = prompt.trim();
            if prompt.is_empty() {
                return Err(Error::Client(format!("empty {c} prompt")));
            }
            Ok((c, prompt.to_string()))
        })
        .collect()
}

/// Describes a frame by its dominant colour and brightness.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubCaptioner;

impl Captioner for StubCaptioner {
    fn candidates(&self, frame: &Frame, count: usize) -> Result<Vec<String>> {
        let means: Vec<f64> = (0..3).map(|c| frame.index_axis(ndarray::Axis(0), c).mean().unwrap_or(0.0)).collect();
        let colour = ["red", "green", "blue"][(0..3)
            .max_by(|&a, &b| means[a].total_cmp(&means[b]))
            .unwrap_or(0)];
        let light = if means.iter().sum::<f64>() / 3.0 > 0.5 { "bright" } else { "dim" };
        let pool = [
            "a video".to_string(),
            format!("a {colour} scene"),
            format!("a {light} {colour} scene"),
            format!("a {light} scene dominated by {colour}"),
            format!("a {light} scene dominated by {colour} tones"),
        ];
        Ok(pool.into_iter().cycle().take(count).collect())
    }
}

/// Echoes the caption tagged with the category: `"OR:" + caption`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubPromptWriter;

impl PromptWriter for StubPromptWriter {
    fn rewrite(&self, category: Category, _instruction: &str, caption: &str) -> Result<String> {
        Ok(format!("{category}:{caption}"))
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into()
}

/// POSTs a PNG frame with `?n=<count>`; expects `{"captions": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpCaptioner {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct CaptionResponse {
    captions: Vec<String>,
}

impl Captioner for HttpCaptioner {
    fn candidates(&self, frame: &Frame, count: usize) -> Result<Vec<String>> {
        let body = frame_to_png(frame)?;
        let mut req = agent(self.timeout)
            .post(&self.url)
            .query("n", count.to_string())
            .header("Content-Type", "image/png");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let parsed: CaptionResponse = req
            .send(&body[..])
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Client(format!("captioner {}: {e}", self.url)))?;
        Ok(parsed.captions)
    }
}

/// POSTs `{"template", "caption"}` as JSON; expects `{"prompt": "..."}`.
#[derive(Debug, Clone)]
pub struct HttpPromptWriter {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct RewriteRequest<'a> {
    template: &'a str,
    caption: &'a str,
}

#[derive(Deserialize)]
struct RewriteResponse {
    prompt: String,
}

impl PromptWriter for HttpPromptWriter {
    fn rewrite(&self, _category: Category, instruction: &str, caption: &str) -> Result<String> {
        let mut req = agent(self.timeout).post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let parsed: RewriteResponse = req
            .send_json(RewriteRequest {
                template: instruction,
                caption,
            })
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Client(format!("language model {}: {e}", self.url)))?;
        Ok(parsed.prompt)
    }
}

/// Settings for [`build_dataset`]. Client URLs and tokens fall back to the
/// `EVE_CAPTION_URL`, `EVE_CAPTION_TOKEN`, `EVE_LLM_URL` and `EVE_LLM_TOKEN`
/// environment variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory holding one video file or frame directory per clip.
    pub videos: PathBuf,
    pub manifest: PathBuf,
    pub source: SourceTag,
    pub candidates: usize,
    pub concurrency: usize,
    pub stub: bool,
    pub caption_url: Option<String>,
    pub llm_url: Option<String>,
    pub timeout_secs: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            videos: PathBuf::new(),
            manifest: PathBuf::from("manifest.jsonl"),
            source: SourceTag::Local,
            candidates: 5,
            concurrency: 4,
            stub: false,
            caption_url: None,
            llm_url: None,
            timeout_secs: 60,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    pub fn clients(&self) -> Result<(Box<dyn Captioner>, Box<dyn PromptWriter>)> {
        if self.stub {
            return Ok((Box::new(StubCaptioner), Box::new(StubPromptWriter)));
        }
        let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let timeout = Duration::from_secs(self.timeout_secs);
        let caption_url = self
            .caption_url
            .clone()
            .or_else(|| env("EVE_CAPTION_URL"))
            .ok_or_else(|| Error::Config("no captioner URL (set caption_url or EVE_CAPTION_URL, or use stub)".into()))?;
        let llm_url = self
            .llm_url
            .clone()
            .or_else(|| env("EVE_LLM_URL"))
            .ok_or_else(|| Error::Config("no language model URL (set llm_url or EVE_LLM_URL, or use stub)".into()))?;
        Ok((
            Box::new(HttpCaptioner {
                url: caption_url,
                token: env("EVE_CAPTION_TOKEN"),
                timeout,
            }),
            Box::new(HttpPromptWriter {
                url: llm_url,
                token: env("EVE_LLM_TOKEN"),
                timeout,
            }),
        ))
    }
}

/// A clip found under the videos directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub video_id: String,
    pub path: PathBuf,
}

const VIDEO_EXTENSIONS: [&str; 6] = ["mp4", "mov", "avi", "mkv", "webm", "gif"];

/// Subdirectories and video files of `root`, sorted by id.
pub fn discover_videos(root: &Path) -> Result<Vec<VideoEntry>> {
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let is_video = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| VIDEO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_dir() || is_video {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if !id.starts_with('.') {
                entries.push(VideoEntry { video_id: id, path });
            }
        }
    }
    entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(entries)
}

/// First frame of a clip, as the file the reviewer should look at.
pub fn first_frame_path(entry: &VideoEntry) -> Option<PathBuf> {
    if entry.path.is_dir() {
        video::list_frame_files(&entry.path).ok()?.into_iter().next()
    } else {
        Some(entry.path.clone())
    }
}

pub fn build_record(
    entry: &VideoEntry,
    source: SourceTag,
    captioner: &dyn Captioner,
    writer: &dyn PromptWriter,
    candidates: usize,
) -> Result<DatasetRecord> {
    let frame = video::sample_frames(&entry.path, 1, 256)?.remove(0);
    let caption = generate_caption(&frame, captioner, candidates)?;
    let prompts = generate_prompts(&caption, writer)?;
    let record = DatasetRecord {
        video_id: entry.video_id.clone(),
        source,
        caption,
        prompts,
        verified: false,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug)]
pub struct BuildReport {
    pub records: Vec<DatasetRecord>,
    /// Clips whose record could not be built, with the reason.
    pub failures: Vec<(String, Error)>,
}

/// Builds one record per clip with at most `cfg.concurrency` clips in flight.
pub fn build_dataset(
    entries: &[VideoEntry],
    cfg: &DatasetConfig,
    captioner: &dyn Captioner,
    writer: &dyn PromptWriter,
) -> Result<BuildReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| (e.video_id.clone(), build_record(e, cfg.source, captioner, writer, cfg.candidates)))
            .collect()
    });
    let mut report = BuildReport {
        records: Vec::new(),
        failures: Vec::new(),
    };
    for (id, r) in results {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(e) => {
                log::warn!("{id}: {e}");
                report.failures.push((id, e));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Approve,
    Reject,
}

/// Records an operator decision on one record and rewrites the manifest.
pub fn record_decision(manifest: &Path, video_id: &str, decision: Decision) -> Result<DatasetRecord> {
    let mut records = read_manifest(manifest)?;
    let record = records
        .iter_mut()
        .find(|r| r.video_id == video_id)
        .ok_or_else(|| Error::Record(format!("no record for `{video_id}`")))?;
    record.verified = decision == Decision::Approve;
    record.validate()?;
    let updated = record.clone();
    write_manifest(&records, manifest)?;
    Ok(updated)
}

/// Human-readable view of a record for review.
pub fn describe(record: &DatasetRecord, first_frame: Option<&Path>) -> String {
    let mut out = format!(
        "video:    {} ({:?})\nframe:    {}\ncaption:  {}\n",
        record.video_id,
        record.source,
        first_frame.map_or_else(|| "<not found>".to_string(), |p| p.display().to_string()),
        record.caption
    );
    for c in Category::ALL {
        out.push_str(&format!("{c}:       {}\n", record.prompts.get(&c).map_or("<missing>", String::as_str)));
    }
    out.push_str(&format!("verified: {}\n", record.verified));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn record(i: usize, verified: bool) -> DatasetRecord {
        DatasetRecord {
            video_id: format!("clip-{i:02}"),
            source: [SourceTag::Davis, SourceTag::Footage, SourceTag::Local][i % 3],
            caption: format!("caption {i} with \"quotes\" and ünïcode"),
            prompts: Category::ALL.iter().map(|c| (*c, format!("{c} prompt {i}"))).collect(),
            verified,
        }
    }

    #[test]
    fn caption_selection() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(select_caption(&s(&["a dog", "a dog running on grass"])).unwrap(), "a dog running on grass");
        assert_eq!(select_caption(&s(&["only"])).unwrap(), "only");
        assert_eq!(select_caption(&s(&["b cat", "a cat", "c cat"])).unwrap(), "a cat");
        assert!(select_caption(&[]).is_err());
        assert!(select_caption(&s(&["  "])).is_err());
    }

    #[test]
    fn stub_prompts_echo_the_caption() {
        let prompts = generate_prompts("a pink lotus", &StubPromptWriter).unwrap();
        assert_eq!(prompts.len(), 4);
        assert_eq!(prompts[&Category::OR], "OR:a pink lotus");
        assert_eq!(prompts[&Category::BC], "BC:a pink lotus");
    }

    struct Forgetful;

    impl PromptWriter for Forgetful {
        fn rewrite(&self, category: Category, _: &str, caption: &str) -> Result<String> {
            Ok(if category == Category::ST { String::new() } else { caption.to_string() })
        }
    }

    #[test]
    fn empty_category_response_is_an_error() {
        assert!(generate_prompts("a cat", &Forgetful).is_err());
        assert!(generate_prompts(" ", &StubPromptWriter).is_err());
    }

    #[test]
    fn templates_embed_the_caption() {
        for c in Category::ALL {
            assert!(c.instruction("a red kite").contains("\"a red kite\""));
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records: Vec<_> = (0..50).map(|i| record(i, i % 2 == 0)).collect();
        write_manifest(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 50);
        assert_eq!(read_manifest(&path).unwrap(), records);

        write_manifest(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn verified_incomplete_record_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut bad = record(1, true);
        bad.prompts.remove(&Category::ST);
        assert!(matches!(write_manifest(&[record(0, true), bad.clone()], &path), Err(Error::Record(_))));
        assert!(!path.exists());
        bad.verified = false;
        write_manifest(&[bad], &path).unwrap();
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let good = to_jsonl(&[record(0, false)]).unwrap();
        let text = format!("{good}\n{{\"video_id\": 3}}\n");
        match parse_jsonl(&text) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let unknown = good.replace("\"OR\"", "\"XX\"");
        assert!(matches!(parse_jsonl(&unknown), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn stub_pipeline_builds_records() {
        let dir = tempfile::tempdir().unwrap();
        for (i, f) in crate::synthetic::Fixture::ALL.iter().enumerate() {
            f.write(&dir.path().join(format!("v{i}")), 3, 32).unwrap();
        }
        let entries = discover_videos(dir.path()).unwrap();
        assert_eq!(entries.len(), 3);
        let cfg = DatasetConfig {
            stub: true,
            ..Default::default()
        };
        let (cap, llm) = cfg.clients().unwrap();
        let report = build_dataset(&entries, &cfg, cap.as_ref(), llm.as_ref()).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.records.len(), 3);
        for r in &report.records {
            assert!(r.is_complete() && !r.verified);
            assert_eq!(r.prompts[&Category::OA], format!("OA:{}", r.caption));
        }
    }

    #[test]
    fn review_sets_the_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut incomplete = record(1, false);
        incomplete.prompts.remove(&Category::BC);
        write_manifest(&[record(0, false), incomplete], &path).unwrap();
        assert!(record_decision(&path, "clip-00", Decision::Approve).unwrap().verified);
        assert!(record_decision(&path, "clip-01", Decision::Approve).is_err());
        assert!(record_decision(&path, "nope", Decision::Reject).is_err());
        let back = read_manifest(&path).unwrap();
        assert!(back[0].verified && !back[1].verified);
        assert!(describe(&back[1], None).contains("BC:       <missing>"));
    }

    #[test]
    fn stub_captioner_is_deterministic() {
        let frame = Array3::from_shape_fn((3, 8, 8), |(c, _, _)| [0.9, 0.2, 0.1][c]);
        let a = StubCaptioner.candidates(&frame, 5).unwrap();
        assert_eq!(a, StubCaptioner.candidates(&frame, 5).unwrap());
        assert_eq!(select_caption(&a).unwrap(), "a dim scene dominated by red tones");
    }

    fn arb_record() -> impl Strategy<Value = DatasetRecord> {
        (
            "[a-z0-9_-]{1,12}",
            0usize..3,
            "\\PC{0,40}",
            proptest::collection::btree_map(0usize..4, "\\PC{1,30}", 0..=4),
            any::<bool>(),
        )
            .prop_map(|(id, src, caption, prompts, verified)| {
                let prompts: BTreeMap<Category, String> =
                    prompts.into_iter().map(|(k, v)| (Category::ALL[k], v)).collect();
                let mut r = DatasetRecord {
                    video_id: id,
                    source: [SourceTag::Davis, SourceTag::Footage, SourceTag::Local][src],
                    caption,
                    prompts,
                    verified,
                };
                r.verified = verified && r.is_complete();
                r
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trips(records in proptest::collection::vec(arb_record(), 0..8)) {
            let text = to_jsonl(&records).unwrap();
            prop_assert_eq!(parse_jsonl(&text).unwrap(), records);
        }
    }
}
