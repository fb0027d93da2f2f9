//! Per-timestep latent optimization between a depth-guided and a depth-free
//! denoising branch.
//!
//! At every denoising step the guided result `Ẑ_{t-1}` is pulled one gradient
//! step towards the direction of the free result `Ẑ'_{t-1}` under the loss
//! `1 − cos(Ẑ_{t-1}, Ẑ'_{t-1})`. The free branch is a constant target and no
//! gradient reaches the UNet.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::PromptEmbedding;
use crate::ddim::ddim_denoise_step;
use crate::depth::DepthFeatures;
use crate::error::{Error, Result};
use crate::latent::{Latent, LatentState};
use crate::predictor::NoisePredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Analytic gradient, cross-checked against central differences on a
    /// subset of coordinates every step.
    NumericCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub gradient: GradientMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.8,
            gradient: GradientMode::Analytic,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Diagnostics for one optimized timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// DDIM step the update started from.
    pub step: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
}

fn dot_norms(u: &Latent, v: &Latent, frame: usize) -> Result<(f64, f64, f64)> {
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate(format!(
            "cosine undefined: frame {} has zero norm",
            frame + 1
        )));
    }
    Ok((dot, nu, nv))
}

fn check_pair(a: &[Latent], b: &[Latent]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} frames", a.len()), format!("{} frames", b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.dim() != y.dim() {
            return Err(Error::shape(format!("{:?}", x.dim()), format!("{:?}", y.dim())));
        }
    }
    Ok(())
}

/// `1 − cos` per frame over flattened latents.
pub fn cosine_loss_per_frame(a: &[Latent], b: &[Latent]) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(k, (u, v))| {
            let (dot, nu, nv) = dot_norms(u, v, k)?;
            if u == v {
                return Ok(0.0);
            }
            Ok(1.0 - dot / (nu * nv))
        })
        .collect()
}

/// Mean over frames of `1 − cos(a_k, b_k)`; lies in `[0, 2]`.
pub fn cosine_loss(a: &[Latent], b: &[Latent]) -> Result<f64> {
    let per_frame = cosine_loss_per_frame(a, b)?;
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Gradient of [`cosine_loss`] with respect to `a`, holding `b` fixed.
///
/// Per frame: `∂/∂u = −(v/(‖u‖‖v‖) − (u·v)·u/(‖u‖³‖v‖)) / K`. Frames where
/// `a` equals `b` sit at the minimum and get an exact zero.
pub fn cosine_loss_gradient(a: &[Latent], b: &[Latent]) -> Result<Vec<Latent>> {
    check_pair(a, b)?;
    let k = a.len() as f64;
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(idx, (u, v))| {
            let (dot, nu, nv) = dot_norms(u, v, idx)?;
            if u == v {
                return Ok(Array3::zeros(u.dim()));
            }
            let cv = -1.0 / (nu * nv * k);
            let cu = dot / (nu.powi(3) * nv * k);
            let mut g = v * cv;
            g.scaled_add(cu, u);
            Ok(g)
        })
        .collect()
}

/// Central-difference derivative of [`cosine_loss`] at coordinate `(frame, index)`.
fn numeric_partial(a: &[Latent], b: &[Latent], frame: usize, index: usize, h: f64) -> Result<f64> {
    let mut plus = a.to_vec();
    let mut minus = a.to_vec();
    let p = plus[frame].as_slice_mut().expect("standard layout");
    p[index] += h;
    let m = minus[frame].as_slice_mut().expect("standard layout");
    m[index] -= h;
    Ok((cosine_loss(&plus, b)? - cosine_loss(&minus, b)?) / (2.0 * h))
}

fn cross_check(a: &[Latent], b: &[Latent], grad: &[Latent]) -> Result<()> {
    let scale = grad
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(());
    }
    for (frame, g) in grad.iter().enumerate() {
        let n = g.len();
        let stride = (n / 8).max(1);
        let gs = g.as_slice().expect("standard layout");
        for index in (0..n).step_by(stride) {
            let fd = numeric_partial(a, b, frame, index, 1e-6)?;
            if (fd - gs[index]).abs() > 1e-4 * scale {
                return Err(Error::Degenerate(format!(
                    "gradient check failed at frame {} index {index}: analytic {} vs numeric {fd}",
                    frame + 1,
                    gs[index]
                )));
            }
        }
    }
    Ok(())
}

/// Denoising of both branches for one step, before the update.
#[derive(Debug, Clone)]
pub struct Branches {
    pub guided: LatentState,
    pub free: LatentState,
}

/// Evaluates the depth-guided and depth-free denoising of `z` at its step.
pub fn denoise_branches(
    z: &LatentState,
    prompt: Option<&PromptEmbedding>,
    depth: Option<&DepthFeatures>,
    predictor: &NoisePredictor<'_>,
) -> Result<Branches> {
    let step = z.step();
    let (eps_guided, eps_free) = rayon::join(
        || predictor.predict(z.frames(), step, prompt, depth),
        || predictor.predict(z.frames(), step, prompt, None),
    );
    let schedule = predictor.schedule();
    Ok(Branches {
        guided: ddim_denoise_step(z, &eps_guided?, schedule)?,
        free: ddim_denoise_step(z, &eps_free?, schedule)?,
    })
}

/// Applies one gradient step to the guided branch.
pub fn update_guided(branches: &Branches, cfg: &OptimizerConfig, step: usize) -> Result<(LatentState, TraceRow)> {
    let guided = branches.guided.frames();
    let free = branches.free.frames();
    let loss_before = cosine_loss(guided, free)?;
    let grad = cosine_loss_gradient(guided, free)?;
    if cfg.gradient == GradientMode::NumericCheck {
        cross_check(guided, free, &grad)?;
    }
    let grad_norm = grad.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let updated: Vec<Latent> = guided
        .iter()
        .zip(&grad)
        .map(|(z, g)| {
            let mut out = z.clone();
            out.scaled_add(-cfg.learning_rate, g);
            out
        })
        .collect();
    let loss_after = cosine_loss(&updated, free)?;
    let state = LatentState::new(updated, branches.guided.step())?;
    Ok((
        state,
        TraceRow {
            step,
            loss_before,
            loss_after,
            grad_norm,
        },
    ))
}

/// One optimized denoising step: `Ẑ_t → Ẑ_{t-1}` with exactly two noise
/// evaluations.
pub fn optimize_step(
    z: &LatentState,
    prompt: Option<&PromptEmbedding>,
    depth: Option<&DepthFeatures>,
    predictor: &NoisePredictor<'_>,
    cfg: &OptimizerConfig,
) -> Result<(LatentState, TraceRow)> {
    cfg.validate()?;
    let branches = denoise_branches(z, prompt, depth, predictor)?;
    update_guided(&branches, cfg, z.step())
}
