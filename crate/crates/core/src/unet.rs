//! A small frozen Conv-Attn UNet used as the toy noise predictor.
//!
//! Every block runs `Conv → self-attention slot → cross-attention → FFN`,
//! each with a residual connection. The self-attention slot switches between
//! SA, FAA and SCA; cross-attention always attends to the frame's own tokens
//! against the prompt. Depth features are added to the output of each
//! down-sampling stage before the next stage runs.

use ndarray::{concatenate, Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, self_attention_frame, AttentionMode, AttentionWeights};
use crate::depth::DepthFeatures;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::nn::{self, instance_norm, layer_norm, silu, Conv2d, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub latent_channels: usize,
    /// Channel width of each down-sampling stage; resolution halves between stages.
    pub widths: Vec<usize>,
    pub text_width: usize,
    pub time_dim: usize,
    /// Scale applied to the final projection.
    pub output_gain: f64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![8, 16],
            text_width: 16,
            time_dim: 16,
            output_gain: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvAttnBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    time_proj: Linear,
    self_attn: AttentionWeights,
    cross_attn: AttentionWeights,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl ConvAttnBlock {
    pub fn random<R: Rng>(rng: &mut R, width: usize, text_width: usize, time_dim: usize) -> Self {
        let attn = |rng: &mut R, src: usize| {
            AttentionWeights::new(
                nn::random_matrix(rng, width, width, 1.0),
                nn::random_matrix(rng, width, src, 1.0),
                nn::random_matrix(rng, width, src, 0.5),
            )
            .expect("consistent shapes")
        };
        Self {
            conv_a: Conv2d::random(rng, width, width, 3, 1, true, 1.0),
            conv_b: Conv2d::random(rng, width, width, 3, 1, true, 0.5),
            time_proj: Linear::random(rng, time_dim, width, true, 0.5),
            self_attn: attn(rng, width),
            cross_attn: attn(rng, text_width),
            ffn_in: Linear::random(rng, width, 2 * width, true, 1.0),
            ffn_out: Linear::random(rng, 2 * width, width, true, 0.5),
        }
    }

    pub fn width(&self) -> usize {
        self.conv_a.out_channels()
    }

    /// Runs the block over all frames of a video at once; the self-attention
    /// slot may read other frames' tokens at this layer.
    pub fn forward(
        &self,
        frames: &[Array3<f64>],
        temb: &Array1<f64>,
        prompt: &Array2<f64>,
        mode: AttentionMode,
    ) -> Result<Vec<Array3<f64>>> {
        let (_, h, w) = frames[0].dim();
        let tbias = self.time_proj.forward_vec(temb).insert_axis(Axis(1)).insert_axis(Axis(2));

        let mut tokens = frames
            .iter()
            .map(|x| {
                let inner = self.conv_a.forward(instance_norm(x).mapv(silu).view())? + &tbias;
                let res = self.conv_b.forward(instance_norm(&inner).mapv(silu).view())?;
                Ok(nn::to_tokens(&(x + &res)))
            })
            .collect::<Result<Vec<_>>>()?;

        let normed: Vec<Array2<f64>> = tokens.iter().map(layer_norm).collect();
        for (i, t) in tokens.iter_mut().enumerate() {
            *t += &self_attention_frame(mode, i + 1, &normed, &self.self_attn)?;
        }
        for t in tokens.iter_mut() {
            *t += &cross_attention(&layer_norm(t), prompt, &self.cross_attn)?;
            let hidden = self.ffn_in.forward(&layer_norm(t)).mapv(silu);
            *t += &self.ffn_out.forward(&hidden);
        }
        Ok(tokens.iter().map(|t| nn::from_tokens(t, h, w)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DownStage {
    downsample: Option<Conv2d>,
    block: ConvAttnBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UpStage {
    merge: Conv2d,
    block: ConvAttnBlock,
    /// Projects to the next shallower width after nearest upsampling.
    upsample: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyUnet {
    config: UnetConfig,
    conv_in: Conv2d,
    down: Vec<DownStage>,
    mid: ConvAttnBlock,
    /// Deepest stage first.
    up: Vec<UpStage>,
    conv_out: Conv2d,
}

impl ToyUnet {
    pub fn random<R: Rng>(rng: &mut R, config: UnetConfig) -> Result<Self> {
        if config.widths.is_empty() || config.latent_channels == 0 {
            return Err(Error::Config("unet needs at least one stage and one latent channel".into()));
        }
        let ws = &config.widths;
        let conv_in = Conv2d::random(rng, config.latent_channels, ws[0], 3, 1, true, 1.0);
        let down = ws
            .iter()
            .enumerate()
            .map(|(i, &width)| DownStage {
                downsample: (i > 0).then(|| Conv2d::random(rng, ws[i - 1], width, 3, 2, true, 1.0)),
                block: ConvAttnBlock::random(rng, width, config.text_width, config.time_dim),
            })
            .collect();
        let deepest = *ws.last().expect("non-empty");
        let mid = ConvAttnBlock::random(rng, deepest, config.text_width, config.time_dim);
        let up = (0..ws.len())
            .rev()
            .map(|i| UpStage {
                merge: Conv2d::random(rng, 2 * ws[i], ws[i], 3, 1, true, 1.0),
                block: ConvAttnBlock::random(rng, ws[i], config.text_width, config.time_dim),
                upsample: (i > 0).then(|| Conv2d::random(rng, ws[i], ws[i - 1], 3, 1, true, 1.0)),
            })
            .collect();
        let conv_out = Conv2d::random(rng, ws[0], config.latent_channels, 3, 1, true, 1.0);
        Ok(Self {
            config,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    /// `(channels, h, w)` of each down-sampling stage for a latent of `h × w`.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        self.config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, h >> i, w >> i))
            .collect()
    }

    /// Side lengths of the latent must be divisible by this.
    pub fn total_stride(&self) -> usize {
        1 << (self.config.widths.len() - 1)
    }

    pub fn forward(
        &self,
        latents: &[Latent],
        timestep: usize,
        prompt: &Array2<f64>,
        depth: Option<&DepthFeatures>,
        mode: AttentionMode,
    ) -> Result<Vec<Latent>> {
        let Some(first) = latents.first() else {
            return Err(Error::shape("at least one frame", "0"));
        };
        let (c, h, w) = first.dim();
        if c != self.config.latent_channels {
            return Err(Error::shape(format!("{} latent channels", self.config.latent_channels), c));
        }
        let stride = self.total_stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("latent sides divisible by {stride}"), format!("{h}x{w}")));
        }
        if let Some(l) = latents.iter().find(|l| l.dim() != first.dim()) {
            return Err(Error::shape(format!("{:?}", first.dim()), format!("{:?}", l.dim())));
        }
        if prompt.ncols() != self.config.text_width {
            return Err(Error::shape(format!("text width {}", self.config.text_width), prompt.ncols()));
        }
        if let Some(m) = depth {
            let expected = self.stage_shapes(h, w);
            if m.len() != latents.len() || m.stage_shapes() != expected {
                return Err(Error::shape(
                    format!("{} frames of depth stages {expected:?}", latents.len()),
                    format!("{} frames of {:?}", m.len(), m.stage_shapes()),
                ));
            }
        }

        let temb = nn::timestep_embedding(timestep, self.config.time_dim);
        let mut x = latents
            .iter()
            .map(|z| self.conv_in.forward(z.view()))
            .collect::<Result<Vec<_>>>()?;

        let mut skips = Vec::with_capacity(self.down.len());
        for (stage_idx, stage) in self.down.iter().enumerate() {
            if let Some(down) = &stage.downsample {
                x = x.iter().map(|f| down.forward(f.view())).collect::<Result<_>>()?;
            }
            x = stage.block.forward(&x, &temb, prompt, mode)?;
            if let Some(m) = depth {
                for (k, f) in x.iter_mut().enumerate() {
                    *f += &m.frame(k)[stage_idx];
                }
            }
            skips.push(x.clone());
        }

        x = self.mid.forward(&x, &temb, prompt, mode)?;

        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            x = x
                .iter()
                .zip(&skip)
                .map(|(a, s)| {
                    let cat = concatenate(Axis(0), &[a.view(), s.view()]).expect("same resolution");
                    stage.merge.forward(cat.view())
                })
                .collect::<Result<_>>()?;
            x = stage.block.forward(&x, &temb, prompt, mode)?;
            if let Some(up) = &stage.upsample {
                x = x
                    .iter()
                    .map(|f| up.forward(nn::upsample_nearest(f, 2).view()))
                    .collect::<Result<_>>()?;
            }
        }

        x.iter()
            .map(|f| {
                let out = self.conv_out.forward(instance_norm(f).mapv(silu).view())?;
                Ok(out * self.config.output_gain)
            })
            .collect()
    }
}
