//! Temporal and prompt consistency of an edited clip.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::video::Frame;

/// Maps a frame to a feature vector.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;

    /// Square side frames are resampled to before embedding, if any.
    fn input_size(&self) -> Option<usize>;

    fn embed_image(&self, frame: &Frame) -> Result<Array1<f64>>;
}

/// Per-frame image–text similarity on the CLIP-score scale (`0..=100`).
pub trait PromptScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, frame: &Frame, prompt: &str) -> Result<f64>;
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero embedding".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Cosine similarity of each neighbouring pair `(i, i+1)`.
pub fn neighbour_similarities(frames: &[Frame], embedder: &dyn ImageEmbedder) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "temporal consistency needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let embeddings = frames.iter().map(|f| embedder.embed_image(f)).collect::<Result<Vec<_>>>()?;
    embeddings.windows(2).map(|w| cosine(&w[0], &w[1])).collect()
}

/// Mean neighbour cosine similarity, in `[-1, 1]`.
pub fn temporal_consistency(frames: &[Frame], embedder: &dyn ImageEmbedder) -> Result<f64> {
    let sims = neighbour_similarities(frames, embedder)?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

pub fn prompt_scores(frames: &[Frame], prompt: &str, scorer: &dyn PromptScorer) -> Result<Vec<f64>> {
    if prompt.trim().is_empty() {
        return Err(Error::Config("prompt consistency needs a non-empty prompt".into()));
    }
    if frames.is_empty() {
        return Err(Error::Config("prompt consistency needs at least one frame".into()));
    }
    frames.iter().map(|f| scorer.score(f, prompt)).collect()
}

/// Mean per-frame prompt score.
pub fn prompt_consistency(frames: &[Frame], prompt: &str, scorer: &dyn PromptScorer) -> Result<f64> {
    let scores = prompt_scores(frames, prompt, scorer)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Nearest-sample resize to `size × size`.
pub fn resample(frame: &Frame, size: usize) -> Frame {
    let (c, h, w) = frame.dim();
    if h == size && w == size {
        return frame.clone();
    }
    Frame::from_shape_fn((c, size, size), |(ci, y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / size as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / size as f64) as usize;
        frame[[ci, sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Deterministic stand-in for a CLIP-style joint embedder.
///
/// Images are resampled to 32×32, pooled to 8×8, centred and projected by a
/// fixed Gaussian matrix. Prompts embed as the sum of per-word vectors from
/// the same seed. The prompt score is `100·max(cos, 0)`.
#[derive(Debug, Clone)]
pub struct ToyClip {
    projection: Array2<f64>,
    text: crate::text::ToyTextEncoder,
    text_projection: Array2<f64>,
}

impl ToyClip {
    pub const INPUT: usize = 32;
    const POOL: usize = 4;
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = 3 * (Self::INPUT / Self::POOL).pow(2);
        let projection = nn::random_matrix(&mut rng, Self::DIM, pooled, 1.0);
        let text_projection = nn::random_matrix(&mut rng, Self::DIM, 16, 1.0);
        Self {
            projection,
            text: crate::text::ToyTextEncoder::new(16, 1, seed),
            text_projection,
        }
    }

    pub fn embed_text(&self, prompt: &str) -> Result<Array1<f64>> {
        let words = crate::text::ToyTextEncoder::words(prompt);
        if words.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        let sum = words
            .iter()
            .map(|w| self.text.word_vector(w))
            .fold(Array1::zeros(16), |acc, v| acc + v);
        Ok(self.text_projection.dot(&sum))
    }
}

impl Default for ToyClip {
    fn default() -> Self {
        Self::new(0xC11F)
    }
}

impl ImageEmbedder for ToyClip {
    fn name(&self) -> &str {
        "toy-clip"
    }

    fn input_size(&self) -> Option<usize> {
        Some(Self::INPUT)
    }

    fn embed_image(&self, frame: &Frame) -> Result<Array1<f64>> {
        if frame.dim().0 != 3 {
            return Err(Error::shape("3 colour channels", frame.dim().0));
        }
        let small = resample(frame, Self::INPUT);
        let pooled = nn::avg_pool(small.view(), Self::POOL).mapv(|v| v - 0.5);
        let flat = Array1::from_iter(pooled.iter().copied());
        let e = self.projection.dot(&flat);
        let norm = e.dot(&e).sqrt();
        // A mid-grey frame has no features; give it a fixed direction so the
        // cosine stays defined.
        if norm < 1e-12 {
            let mut unit = Array1::zeros(Self::DIM);
            unit[0] = 1.0;
            return Ok(unit);
        }
        Ok(e / norm)
    }
}

impl PromptScorer for ToyClip {
    fn name(&self) -> &str {
        "toy-clip"
    }

    fn score(&self, frame: &Frame, prompt: &str) -> Result<f64> {
        let sim = cosine(&self.embed_image(frame)?, &self.embed_text(prompt)?)?;
        Ok(100.0 * sim.max(0.0))
    }
}

/// Prompt-blind scorer for fixtures: `20 + 20 · mean luma`.
///
/// Flat grey frames of value 0.5, 0.6, 0.4 and 0.7 score 30, 32, 28 and 34.
#[derive(Debug, Clone, Copy, Default)]
pub struct LumaScorer;

impl PromptScorer for LumaScorer {
    fn name(&self) -> &str {
        "luma-stub"
    }

    fn score(&self, frame: &Frame, _prompt: &str) -> Result<f64> {
        let (_, h, w) = frame.dim();
        let n = (h * w) as f64;
        let mut sum = 0.0;
        for ((c, _, _), v) in frame.indexed_iter() {
            sum += [0.299, 0.587, 0.114][c.min(2)] * v;
        }
        Ok(20.0 + 20.0 * sum / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    /// [`ToyClip`] for both metrics.
    #[default]
    Toy,
    /// [`ToyClip`] for temporal consistency, [`LumaScorer`] for prompts.
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub first: usize,
    pub second: usize,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub frames: usize,
    pub embedder: String,
    /// Resolution frames were resampled to before embedding.
    pub embedder_input: Option<usize>,
    /// Mean neighbour cosine ×100.
    pub temporal_consistency: Option<f64>,
    pub prompt: Option<String>,
    pub scorer: Option<String>,
    /// Mean per-frame prompt score.
    pub prompt_consistency: Option<f64>,
    pub pairs: Vec<PairSimilarity>,
    pub per_frame: Vec<f64>,
}

impl MetricsReport {
    /// Scores `frames`; temporal consistency needs `K ≥ 2` and is skipped
    /// otherwise, prompt consistency runs when a prompt is given.
    pub fn evaluate(
        frames: &[Frame],
        prompt: Option<&str>,
        embedder: &dyn ImageEmbedder,
        scorer: &dyn PromptScorer,
    ) -> Result<Self> {
        let pairs: Vec<PairSimilarity> = if frames.len() >= 2 {
            neighbour_similarities(frames, embedder)?
                .into_iter()
                .enumerate()
                .map(|(i, cosine)| PairSimilarity {
                    first: i,
                    second: i + 1,
                    cosine,
                })
                .collect()
        } else {
            Vec::new()
        };
        let tc = (!pairs.is_empty()).then(|| 100.0 * pairs.iter().map(|p| p.cosine).sum::<f64>() / pairs.len() as f64);
        let per_frame = match prompt {
            Some(p) => prompt_scores(frames, p, scorer)?,
            None => Vec::new(),
        };
        let pc = (!per_frame.is_empty()).then(|| per_frame.iter().sum::<f64>() / per_frame.len() as f64);
        Ok(Self {
            schema_version: 1,
            frames: frames.len(),
            embedder: embedder.name().to_string(),
            embedder_input: embedder.input_size(),
            temporal_consistency: tc,
            prompt: prompt.map(str::to_string),
            scorer: prompt.map(|_| scorer.name().to_string()),
            prompt_consistency: pc,
            pairs,
            per_frame,
        })
    }

    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("first,second,cosine\n");
        for p in &self.pairs {
            out.push_str(&format!("{},{},{}\n", p.first, p.second, p.cosine));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
