//! Backend adapter contract and the in-repo toy backend.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, PromptEmbedding};
use crate::depth::{DepthEncoder, DepthFeatures, DepthMap};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::nn;
use crate::schedule::{BetaSchedule, NoiseSchedule};
use crate::text::ToyTextEncoder;
use crate::unet::{ToyUnet, UnetConfig};
use crate::video::Frame;

/// Frozen models behind the editing pipeline.
///
/// Implementations must be pure: identical inputs give identical outputs and
/// no call mutates shared state, so one backend can serve concurrent runs.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Image pixels per latent pixel along each side.
    fn downscale(&self) -> usize;

    /// Factor applied to encoder output before diffusion (and removed before decoding).
    fn latent_scale(&self) -> f64;

    /// `(channels, h, w)` of each UNet down-sampling stage for a latent of `h × w`.
    fn stage_shapes(&self, latent_h: usize, latent_w: usize) -> Vec<(usize, usize, usize)>;

    /// Working resolutions must be a multiple of this.
    fn resolution_multiple(&self) -> usize;

    fn encode_image(&self, frame: &Frame) -> Result<Latent>;

    fn decode_latent(&self, latent: &Latent) -> Result<Frame>;

    fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding>;

    /// Embedding consumed by cross-attention when no prompt is given.
    fn null_text(&self) -> PromptEmbedding;

    fn encode_depth(&self, maps: &[DepthMap]) -> Result<DepthFeatures>;

    /// Noise prediction `ε_θ` for every frame at a training timestep.
    fn predict_noise(
        &self,
        latents: &[Latent],
        timestep: usize,
        prompt: Option<&PromptEmbedding>,
        depth: Option<&DepthFeatures>,
        mode: AttentionMode,
    ) -> Result<Vec<Latent>>;
}

/// Small deterministic network suite implementing [`Backend`].
///
/// * image encoder: `[0,1] → [-1,1]`, 8×8 average pooling, then a 3→4
///   channel map with orthonormal columns; the decoder applies its transpose
///   and upsamples, so `decode(encode(x))` is the block-mean of `x`.
/// * noise predictor: the closed-form optimum for Gaussian latents
///   ([`GaussianPrior`]) plus the output of a two-stage Conv-Attn [`ToyUnet`]
///   (widths 8 and 16). The closed-form part keeps the sampling trajectory
///   contractive the way a trained model's is; the UNet carries every
///   attention, prompt and depth effect.
/// * depth encoder: bias-free residual stack matching the UNet stages.
/// * text encoder: [`ToyTextEncoder`].
///
/// Weights are drawn once from a seeded generator and never change. The whole
/// bundle serializes to JSON, which is also how external weight files are
/// loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackend {
    name: String,
    downscale: usize,
    latent_scale: f64,
    /// `(latent_channels, 3)` with orthonormal columns.
    color_map: Array2<f64>,
    prior: GaussianPrior,
    unet: ToyUnet,
    depth: DepthEncoder,
    text: ToyTextEncoder,
}

/// `ε*(z, t) = √(1-ᾱ_t) / (ᾱ_t·σ² + 1 - ᾱ_t) · z`, the minimum-error noise
/// prediction when clean latents are `N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub data_variance: f64,
    /// `ᾱ` per training timestep `1..=len` the backend was built for.
    alpha_bars: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(data_variance: f64, schedule: &NoiseSchedule) -> Self {
        Self {
            data_variance,
            alpha_bars: schedule.alpha_bars().to_vec(),
        }
    }

    pub fn train_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn coefficient(&self, timestep: usize) -> Result<f64> {
        let a = match timestep {
            0 => 1.0,
            t if t <= self.alpha_bars.len() => self.alpha_bars[t - 1],
            t => {
                return Err(Error::StepOutOfRange {
                    index: t,
                    max: self.alpha_bars.len(),
                })
            }
        };
        Ok((1.0 - a).sqrt() / (a * self.data_variance + 1.0 - a))
    }
}

pub const TOY_SEED: u64 = 0x0E7E_2023;

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new(TOY_SEED).expect("default toy configuration is valid")
    }
}

impl ToyBackend {
    pub fn new(seed: u64) -> Result<Self> {
        Self::with_config(seed, UnetConfig::default())
    }

    pub fn with_config(seed: u64, config: UnetConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color_map = orthonormal_columns(nn::random_matrix(&mut rng, config.latent_channels, 3, 1.0))?;
        let text = ToyTextEncoder::new(config.text_width, 8, seed);
        let depth = DepthEncoder::random(&mut rng, 2, &config.widths, 0.5);
        let unet = ToyUnet::random(&mut rng, config)?;
        let schedule = NoiseSchedule::new(1000, 1, &BetaSchedule::toy_default())?;
        Ok(Self {
            name: "toy".into(),
            downscale: 8,
            latent_scale: 1.0,
            color_map,
            prior: GaussianPrior::new(0.5, &schedule),
            unet,
            depth,
            text,
        })
    }

    pub fn unet(&self) -> &ToyUnet {
        &self.unet
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Backend(format!("serialize weights: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a weight bundle written by [`ToyBackend::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut backend: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Backend(format!("{}: not a weight bundle: {e}", path.display())))?;
        if backend.color_map.ncols() != 3 || backend.color_map.nrows() != backend.unet.config().latent_channels {
            return Err(Error::Backend(format!("{}: encoder shape does not match unet", path.display())));
        }
        backend.name = format!("weights:{}", path.display());
        Ok(backend)
    }
}

fn orthonormal_columns(mut m: Array2<f64>) -> Result<Array2<f64>> {
    let cols = m.ncols();
    if m.nrows() < cols {
        return Err(Error::Config("need at least 3 latent channels".into()));
    }
    for j in 0..cols {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let prev = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(m)
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn downscale(&self) -> usize {
        self.downscale
    }

    fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    fn stage_shapes(&self, latent_h: usize, latent_w: usize) -> Vec<(usize, usize, usize)> {
        self.unet.stage_shapes(latent_h, latent_w)
    }

    fn resolution_multiple(&self) -> usize {
        self.downscale * self.unet.total_stride()
    }

    fn encode_image(&self, frame: &Frame) -> Result<Latent> {
        let (c, h, w) = frame.dim();
        if c != 3 || h % self.downscale != 0 || w % self.downscale != 0 {
            return Err(Error::shape(
                format!("(3, h, w) with sides divisible by {}", self.downscale),
                format!("{:?}", frame.dim()),
            ));
        }
        let pooled = nn::avg_pool(frame.mapv(|v| 2.0 * v - 1.0).view(), self.downscale);
        let (_, lh, lw) = pooled.dim();
        let flat = pooled.into_shape_with_order((3, lh * lw)).expect("pooled map");
        let z = self.color_map.dot(&flat) * self.latent_scale;
        Ok(z.into_shape_with_order((self.color_map.nrows(), lh, lw)).expect("latent map"))
    }

    fn decode_latent(&self, latent: &Latent) -> Result<Frame> {
        let (c, lh, lw) = latent.dim();
        if c != self.color_map.nrows() {
            return Err(Error::shape(format!("{} latent channels", self.color_map.nrows()), c));
        }
        let flat = latent.to_shape((c, lh * lw)).expect("latent map");
        let rgb = self.color_map.t().dot(&flat) / self.latent_scale;
        let rgb: Array3<f64> = rgb.into_shape_with_order((3, lh, lw)).expect("rgb map");
        Ok(nn::upsample_nearest(&rgb, self.downscale).mapv(|v| (v + 1.0) / 2.0))
    }

    fn encode_text(&self, prompt: &str) -> Result<PromptEmbedding> {
        Ok(self.text.encode(prompt))
    }

    fn null_text(&self) -> PromptEmbedding {
        self.text.null()
    }

    fn encode_depth(&self, maps: &[DepthMap]) -> Result<DepthFeatures> {
        self.depth.encode(maps)
    }

    fn predict_noise(
        &self,
        latents: &[Latent],
        timestep: usize,
        prompt: Option<&PromptEmbedding>,
        depth: Option<&DepthFeatures>,
        mode: AttentionMode,
    ) -> Result<Vec<Latent>> {
        let null;
        let prompt = match prompt {
            Some(p) => p,
            None => {
                null = self.text.null();
                &null
            }
        };
        let c = self.prior.coefficient(timestep)?;
        let residual = self.unet.forward(latents, timestep, prompt.tokens(), depth, mode)?;
        Ok(residual
            .into_iter()
            .zip(latents)
            .map(|(mut r, z)| {
                r.scaled_add(c, z);
                r
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_latents(seed: u64, k: usize, side: usize) -> Vec<Latent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| Array3::from_shape_fn((4, side, side), |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn encoder_decoder_is_block_mean() {
        let b = ToyBackend::default();
        let frame = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c * 5 + y * 3 + x) % 9) as f64 / 8.0);
        let z = b.encode_image(&frame).unwrap();
        assert_eq!(z.dim(), (4, 2, 2));
        let back = b.decode_latent(&z).unwrap();
        let pooled = nn::upsample_nearest(&nn::avg_pool(frame.view(), 8), 8);
        let err = back.iter().zip(pooled.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn prediction_is_deterministic_and_shape_preserving() {
        let b = ToyBackend::default();
        for (k, side) in [(1, 2), (2, 4), (3, 8)] {
            let z = random_latents(k as u64, k, side);
            let p = b.encode_text("a cat").unwrap();
            let a = b.predict_noise(&z, 501, Some(&p), None, AttentionMode::Faa).unwrap();
            let again = b.predict_noise(&z, 501, Some(&p), None, AttentionMode::Faa).unwrap();
            assert_eq!(a, again);
            assert!(a.iter().all(|e| e.dim() == (4, side, side)));
        }
    }

    #[test]
    fn zero_depth_is_a_no_op() {
        let b = ToyBackend::default();
        let z = random_latents(4, 3, 4);
        let zero = DepthFeatures::zeros(3, &b.stage_shapes(4, 4));
        let with = b.predict_noise(&z, 21, None, Some(&zero), AttentionMode::Sca).unwrap();
        let without = b.predict_noise(&z, 21, None, None, AttentionMode::Sca).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn identical_frames_under_faa_get_identical_noise() {
        let b = ToyBackend::default();
        let z = random_latents(5, 1, 4);
        let pair = vec![z[0].clone(), z[0].clone()];
        let eps = b.predict_noise(&pair, 301, None, None, AttentionMode::Faa).unwrap();
        assert_eq!(eps[0], eps[1]);
    }

    #[test]
    fn depth_resolution_mismatch_is_rejected() {
        let b = ToyBackend::default();
        let z = random_latents(6, 2, 4);
        let wrong = DepthFeatures::zeros(2, &b.stage_shapes(8, 8));
        assert!(b.predict_noise(&z, 1, None, Some(&wrong), AttentionMode::Sa).is_err());
        let few = DepthFeatures::zeros(1, &b.stage_shapes(4, 4));
        assert!(b.predict_noise(&z, 1, None, Some(&few), AttentionMode::Sa).is_err());
        assert!(b.predict_noise(&random_latents(7, 1, 3), 1, None, None, AttentionMode::Sa).is_err());
    }

    #[test]
    fn weights_round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let b = ToyBackend::new(99).unwrap();
        b.save(&path).unwrap();
        let loaded = ToyBackend::load(&path).unwrap();
        let z = random_latents(8, 2, 4);
        assert_eq!(
            b.predict_noise(&z, 7, None, None, AttentionMode::Faa).unwrap(),
            loaded.predict_noise(&z, 7, None, None, AttentionMode::Faa).unwrap()
        );
        std::fs::write(&path, b"{}").unwrap();
        assert!(matches!(ToyBackend::load(&path), Err(Error::Backend(_))));
    }
}
