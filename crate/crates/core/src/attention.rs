//! Attention kernels used by the Conv-Attn blocks.
//!
//! Tokens are rows: a frame's feature map `(C, H, W)` becomes an `(H·W, C)`
//! matrix before it reaches any of these functions.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which keys and values the self-attention slot of every block sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Plain per-frame self-attention.
    Sa,
    /// Frame-align attention: keys and values from the first frame.
    #[default]
    Faa,
    /// Sparse-causal attention: keys and values from the first and the previous frame.
    Sca,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Sa, AttentionMode::Sca, AttentionMode::Faa];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Sa => "sa",
            AttentionMode::Faa => "faa",
            AttentionMode::Sca => "sca",
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(AttentionMode::Sa),
            "faa" => Ok(AttentionMode::Faa),
            "sca" => Ok(AttentionMode::Sca),
            other => Err(Error::Config(format!("unknown attention mode {other:?} (expected sa, faa or sca)"))),
        }
    }
}

/// Frozen query/key/value projections of one attention site.
///
/// `w_q` is `(d, d_model)`; `w_k` and `w_v` are `(d, d_source)` where
/// `d_source` is `d_model` for self-attention and the text width for
/// cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl AttentionWeights {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>) -> Result<Self> {
        if w_k.dim() != w_v.dim() || w_q.nrows() != w_k.nrows() {
            return Err(Error::shape(
                format!("matching projections for W_Q {:?}", w_q.dim()),
                format!("W_K {:?}, W_V {:?}", w_k.dim(), w_v.dim()),
            ));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn query_width(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn source_width(&self) -> usize {
        self.w_k.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.w_v.nrows()
    }

    fn project(w: &Array2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != w.ncols() {
            return Err(Error::shape(
                format!("{} feature columns", w.ncols()),
                format!("{} columns", x.ncols()),
            ));
        }
        Ok(x.dot(&w.t()))
    }

    fn attend(&self, query: ArrayView2<f64>, source: ArrayView2<f64>) -> Result<Array2<f64>> {
        let q = Self::project(&self.w_q, query)?;
        let k = Self::project(&self.w_k, source)?;
        let v = Self::project(&self.w_v, source)?;
        scaled_dot_attention(q.view(), k.view(), v.view())
    }
}

/// `softmax(Q·Kᵀ/√d)·V` with a max-shifted softmax per query row.
pub fn scaled_dot_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(format!("key width {}", q.ncols()), format!("{}", k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(format!("{} value rows", k.nrows()), format!("{}", v.nrows())));
    }
    if k.nrows() == 0 {
        return Err(Error::shape("at least one key", "0 keys"));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut weights = q.dot(&k.t());
    for mut row in weights.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| ((s - max) * scale).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(weights.dot(&v))
}

/// Self-attention slot for frame `index` (1-based) under `mode`.
///
/// For sparse-causal attention on the first frame, the missing previous frame
/// is replaced by the first frame itself, so the result coincides with
/// frame-align attention.
pub fn self_attention_frame(
    mode: AttentionMode,
    index: usize,
    frames: &[Array2<f64>],
    weights: &AttentionWeights,
) -> Result<Array2<f64>> {
    if index == 0 || index > frames.len() {
        return Err(Error::FrameOutOfRange {
            index,
            frames: frames.len(),
        });
    }
    let own = frames[index - 1].view();
    if let Some(other) = frames.iter().find(|f| f.dim() != own.dim()) {
        return Err(Error::shape(format!("{:?}", own.dim()), format!("{:?}", other.dim())));
    }
    let first = frames[0].view();
    match mode {
        AttentionMode::Sa => weights.attend(own, own),
        AttentionMode::Faa => weights.attend(own, first),
        AttentionMode::Sca => {
            let prev = frames[index.saturating_sub(2)].view();
            let source = concatenate(Axis(0), &[first, prev]).expect("frames share a width");
            weights.attend(own, source.view())
        }
    }
}

/// Frozen text features consumed by cross-attention, one token per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding(Array2<f64>);

impl PromptEmbedding {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::Degenerate("empty prompt embedding".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite prompt embedding".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}

/// Cross-attention from frame tokens to prompt tokens.
pub fn cross_attention(frame: &Array2<f64>, prompt: &Array2<f64>, weights: &AttentionWeights) -> Result<Array2<f64>> {
    if prompt.nrows() == 0 {
        return Err(Error::Degenerate("empty prompt embedding".into()));
    }
    weights.attend(frame.view(), prompt.view())
}
