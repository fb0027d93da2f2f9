//! Per-frame latent tensors.

use ndarray::Array3;

use crate::error::{Error, Result};

/// One frame's latent, laid out `(channels, height, width)`.
pub type Latent = Array3<f64>;

/// The `K` per-frame latents of a video at one DDIM step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    frames: Vec<Latent>,
    step: usize,
}

impl LatentState {
    /// Builds a state; all frames must share one shape and hold finite values.
    pub fn new(frames: Vec<Latent>, step: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::shape("at least one frame", "0 frames"));
        };
        let dim = first.dim();
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::shape(
                    format!("{dim:?} for every frame"),
                    format!("{:?} at frame {}", f.dim(), i + 1),
                ));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "non-finite latent entry in frame {}",
                    i + 1
                )));
            }
        }
        Ok(Self { frames, step })
    }

    pub fn frames(&self) -> &[Latent] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Latent> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// DDIM step index in `0..=T`.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn frame_dim(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }

    pub(crate) fn ensure_same_shape(&self, other: &[Latent]) -> Result<()> {
        if other.len() != self.frames.len() {
            return Err(Error::shape(
                format!("{} frames", self.frames.len()),
                format!("{} frames", other.len()),
            ));
        }
        for (a, b) in self.frames.iter().zip(other) {
            if a.dim() != b.dim() {
                return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
            }
        }
        Ok(())
    }
}

/// Largest elementwise absolute difference between two frame lists.
pub fn max_abs_diff(a: &[Latent], b: &[Latent]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
