//! Depth estimation and the depth-feature pyramid injected into the UNet.

use std::time::Duration;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::video::{frame_to_png, Frame};

/// Single-channel depth map `(height, width)` with values in `[0, 1]`.
pub type DepthMap = Array2<f64>;

/// Per-frame feature pyramids, one tensor per UNet down-sampling stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFeatures {
    frames: Vec<Vec<Array3<f64>>>,
}

impl DepthFeatures {
    pub fn new(frames: Vec<Vec<Array3<f64>>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::shape("at least one frame", "0"));
        };
        for (i, pyramid) in frames.iter().enumerate() {
            let dims: Vec<_> = pyramid.iter().map(|t| t.dim()).collect();
            let expected: Vec<_> = first.iter().map(|t| t.dim()).collect();
            if dims != expected {
                return Err(Error::shape(format!("{expected:?}"), format!("{dims:?} at frame {}", i + 1)));
            }
            if pyramid.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::Degenerate(format!("non-finite depth feature at frame {}", i + 1)));
            }
        }
        for pair in first.windows(2) {
            let (_, h0, w0) = pair[0].dim();
            let (_, h1, w1) = pair[1].dim();
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::shape("stage resolutions halving", format!("{:?}", (h0, w0, h1, w1))));
            }
        }
        Ok(Self { frames })
    }

    /// All-zero pyramid with the given per-stage `(channels, h, w)` shapes.
    pub fn zeros(frames: usize, stages: &[(usize, usize, usize)]) -> Self {
        Self {
            frames: (0..frames)
                .map(|_| stages.iter().map(|&d| Array3::zeros(d)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, index: usize) -> &[Array3<f64>] {
        &self.frames[index]
    }

    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.frames[0].iter().map(|t| t.dim()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.frames.iter().flatten().all(|t| t.iter().all(|v| *v == 0.0))
    }
}

/// Produces one depth map per frame.
pub trait DepthEstimator: Send + Sync {
    fn estimate(&self, frames: &[Frame]) -> Result<Vec<DepthMap>>;
}

/// Deterministic stand-in for a monocular depth network.
///
/// Depth is the frame's luma plus a left-to-right ramp times the luma's
/// deviation from its mean, clamped to `[0, 1]`. A flat frame therefore gives
/// a flat map.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubDepth;

impl StubDepth {
    pub fn estimate_one(frame: &Frame) -> DepthMap {
        let (_, h, w) = frame.dim();
        let luma = Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * frame[[0, y, x]] + 0.587 * frame[[1, y, x]] + 0.114 * frame[[2, y, x]]
        });
        let mean = luma.mean().unwrap_or(0.0);
        let denom = (w.max(2) - 1) as f64;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let l = luma[[y, x]];
            (l + (x as f64 / denom) * (l - mean)).clamp(0.0, 1.0)
        })
    }
}

impl DepthEstimator for StubDepth {
    fn estimate(&self, frames: &[Frame]) -> Result<Vec<DepthMap>> {
        Ok(frames.iter().map(Self::estimate_one).collect())
    }
}

/// Remote depth estimator: POSTs each frame as PNG and expects
/// `{"depth": [[f64; width]; height]}` back.
#[derive(Debug, Clone)]
pub struct HttpDepth {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct DepthResponse {
    depth: Vec<Vec<f64>>,
}

impl DepthEstimator for HttpDepth {
    fn estimate(&self, frames: &[Frame]) -> Result<Vec<DepthMap>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        frames
            .iter()
            .map(|frame| {
                let body = frame_to_png(frame)?;
                let mut req = agent.post(&self.url).header("Content-Type", "image/png");
                if let Some(token) = &self.token {
                    req = req.header("Authorization", &format!("Bearer {token}"));
                }
                let parsed: DepthResponse = req
                    .send(&body[..])
                    .and_then(|mut r| r.body_mut().read_json())
                    .map_err(|e| Error::Backend(format!("depth service {}: {e}", self.url)))?;
                let (_, h, w) = frame.dim();
                if parsed.depth.len() != h || parsed.depth.iter().any(|r| r.len() != w) {
                    return Err(Error::Backend(format!("depth service returned a map not shaped {h}x{w}")));
                }
                let flat: Vec<f64> = parsed.depth.into_iter().flatten().collect();
                let map = Array2::from_shape_vec((h, w), flat).expect("checked shape");
                Ok(map.mapv(|v| v.clamp(0.0, 1.0)))
            })
            .collect()
    }
}

const FLAT_SPAN: f64 = 1e-9;

/// Per-frame min-max normalization; a flat map becomes all zeros.
///
/// Spans within rounding noise of the map's magnitude count as flat, so
/// ulp-level jitter is not stretched to the full range.
#[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN spans count as flat
pub fn normalize_depth(map: &DepthMap) -> DepthMap {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min > FLAT_SPAN * max.abs().max(min.abs()).max(1.0)) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / (max - min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DepthStage {
    down: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
}

/// Frozen bias-free residual encoder turning depth maps into a pyramid.
///
/// Every layer is a bias-free convolution followed by a zero-preserving
/// activation, so a zero map encodes to an all-zero pyramid. Resolution after
/// stage `k` (1-based) is the input size over `2^(stem + k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEncoder {
    stem: Vec<Conv2d>,
    stages: Vec<DepthStage>,
    gain: f64,
}

impl DepthEncoder {
    pub fn random<R: Rng>(rng: &mut R, stem_downsamples: usize, stage_widths: &[usize], gain: f64) -> Self {
        let mut c = 1;
        let mut stem = Vec::new();
        for _ in 0..stem_downsamples {
            let c_out = (c * 4).min(stage_widths.first().copied().unwrap_or(4)).max(2);
            stem.push(Conv2d::random(rng, c, c_out, 3, 2, false, 1.0));
            c = c_out;
        }
        let stages = stage_widths
            .iter()
            .map(|&width| {
                let stage = DepthStage {
                    down: Conv2d::random(rng, c, width, 3, 2, false, 1.0),
                    res_a: Conv2d::random(rng, width, width, 3, 1, false, 1.0),
                    res_b: Conv2d::random(rng, width, width, 3, 1, false, 0.5),
                };
                c = width;
                stage
            })
            .collect();
        Self { stem, stages, gain }
    }

    pub fn total_stride(&self) -> usize {
        1 << (self.stem.len() + self.stages.len())
    }

    /// `(channels, h, w)` of each stage for an input of `size × size`.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let mut f = 1 << self.stem.len();
        self.stages
            .iter()
            .map(|s| {
                f *= 2;
                (s.down.out_channels(), height / f, width / f)
            })
            .collect()
    }

    pub fn encode(&self, maps: &[DepthMap]) -> Result<DepthFeatures> {
        let stride = self.total_stride();
        let frames = maps
            .iter()
            .map(|map| {
                let (h, w) = map.dim();
                if h % stride != 0 || w % stride != 0 {
                    return Err(Error::shape(
                        format!("depth map sides divisible by {stride}"),
                        format!("{h}x{w}"),
                    ));
                }
                self.encode_one(map)
            })
            .collect::<Result<Vec<_>>>()?;
        DepthFeatures::new(frames)
    }

    fn encode_one(&self, map: &DepthMap) -> Result<Vec<Array3<f64>>> {
        let relu = |v: f64| v.max(0.0);
        let mut x = normalize_depth(map).insert_axis(Axis(0));
        for conv in &self.stem {
            x = conv.forward(x.view())?.mapv(relu);
        }
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.down.forward(x.view())?;
            let inner = stage.res_a.forward(x.mapv(relu).view())?.mapv(relu);
            x = &x + &stage.res_b.forward(inner.view())?;
            pyramid.push(&x * self.gain);
        }
        Ok(pyramid)
    }
}
