use std::sync::atomic::{AtomicUsize, Ordering};

use crate::attention::{AttentionMode, PromptEmbedding};
use crate::backend::Backend;
use crate::depth::DepthFeatures;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

/// Noise prediction at a DDIM step with classifier-free guidance and
/// evaluation counting.
///
/// One call to [`NoisePredictor::predict`] is one noise evaluation, however
/// many backbone passes guidance needs.
pub struct NoisePredictor<'a> {
    backend: &'a dyn Backend,
    schedule: &'a NoiseSchedule,
    mode: AttentionMode,
    guidance_scale: f64,
    evaluations: AtomicUsize,
    passes: AtomicUsize,
}

impl<'a> NoisePredictor<'a> {
    pub fn new(backend: &'a dyn Backend, schedule: &'a NoiseSchedule, mode: AttentionMode, guidance_scale: f64) -> Self {
        Self {
            backend,
            schedule,
            mode,
            guidance_scale,
            evaluations: AtomicUsize::new(0),
            passes: AtomicUsize::new(0),
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    /// `ε` for latents sitting at (or moving to) DDIM step `step ∈ 1..=T`.
    pub fn predict(
        &self,
        latents: &[Latent],
        step: usize,
        prompt: Option<&PromptEmbedding>,
        depth: Option<&DepthFeatures>,
    ) -> Result<Vec<Latent>> {
        if step == 0 || step > self.schedule.ddim_steps() {
            return Err(Error::StepOutOfRange {
                index: step,
                max: self.schedule.ddim_steps(),
            });
        }
        let timestep = self.schedule.timestep(step)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let pass = |p: Option<&PromptEmbedding>| {
            self.passes.fetch_add(1, Ordering::Relaxed);
            self.backend.predict_noise(latents, timestep, p, depth, self.mode)
        };
        match prompt {
            Some(p) if self.guidance_scale != 1.0 => {
                let uncond = pass(None)?;
                let cond = pass(Some(p))?;
                Ok(uncond
                    .into_iter()
                    .zip(cond)
                    .map(|(u, c)| {
                        let mut out = u.clone();
                        out.scaled_add(self.guidance_scale, &(c - &u));
                        out
                    })
                    .collect())
            }
            _ => pass(prompt),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Backbone forward passes, counting both halves of a guided evaluation.
    pub fn backbone_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_counts(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
        self.passes.store(0, Ordering::Relaxed);
    }
}
