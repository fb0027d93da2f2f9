//! Noise schedules and DDIM timestep sub-sampling.
//!
//! A [`NoiseSchedule`] holds the per-step variances `β_t` of the forward
//! chain, their cumulative products `ᾱ_t = ∏_{s≤t} (1 − β_s)`, and the map from
//! DDIM step index (`1..=T`) to training timestep. Step index `0` is the clean
//! boundary where `ᾱ = 1` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// How the per-step variances are laid out over the training horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum BetaSchedule {
    /// `β` evenly spaced between the endpoints.
    Linear { start: f64, end: f64 },
    /// `√β` evenly spaced between the square roots of the endpoints.
    ScaledLinear { start: f64, end: f64 },
    /// Explicit per-step variances, one per training step.
    Custom(Vec<f64>),
}

impl BetaSchedule {
    /// Endpoints used with pretrained latent-diffusion weights.
    pub fn pretrained_default() -> Self {
        BetaSchedule::ScaledLinear {
            start: 0.000_85,
            end: 0.012,
        }
    }

    /// Endpoints used with the in-repo toy backend.
    pub fn toy_default() -> Self {
        BetaSchedule::Linear {
            start: 1e-4,
            end: 0.02,
        }
    }

    fn betas(&self, train_steps: usize) -> Result<Vec<f64>> {
        let check_endpoints = |start: f64, end: f64| -> Result<()> {
            let ok = |b: f64| b.is_finite() && b > 0.0 && b < 1.0;
            if !ok(start) || !ok(end) {
                return Err(Error::Schedule(format!(
                    "beta endpoints must lie in (0, 1), got {start} and {end}"
                )));
            }
            if start > end {
                return Err(Error::Schedule(format!(
                    "beta endpoints must be non-decreasing, got {start} > {end}"
                )));
            }
            Ok(())
        };
        match self {
            BetaSchedule::Linear { start, end } => {
                check_endpoints(*start, *end)?;
                Ok(linspace(*start, *end, train_steps))
            }
            BetaSchedule::ScaledLinear { start, end } => {
                check_endpoints(*start, *end)?;
                Ok(linspace(start.sqrt(), end.sqrt(), train_steps)
                    .into_iter()
                    .map(|b| b * b)
                    .collect())
            }
            BetaSchedule::Custom(betas) => {
                if betas.len() != train_steps {
                    return Err(Error::Schedule(format!(
                        "{} custom betas for {train_steps} training steps",
                        betas.len()
                    )));
                }
                if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
                    return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
                }
                Ok(betas.clone())
            }
        }
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let span = end - start;
    (0..n)
        .map(|i| start + span * (i as f64) / ((n - 1) as f64))
        .collect()
}

/// Immutable diffusion schedule shared by inversion and denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timestep_map: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(train_steps: usize, ddim_steps: usize, betas: &BetaSchedule) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::Schedule("train_steps must be positive".into()));
        }
        if ddim_steps == 0 || ddim_steps > train_steps {
            return Err(Error::Schedule(format!(
                "ddim_steps must lie in 1..={train_steps}, got {ddim_steps}"
            )));
        }
        let betas = betas.betas(train_steps)?;
        let alpha_bars: Vec<f64> = betas
            .iter()
            .scan(1.0_f64, |prod, b| {
                *prod *= 1.0 - b;
                Some(*prod)
            })
            .collect();
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if alpha_bars.windows(2).any(|w| !(w[1] < w[0])) || alpha_bars[0] >= 1.0 {
            return Err(Error::Schedule(
                "cumulative alphas are not strictly decreasing (betas too small to resolve)".into(),
            ));
        }

        // Leading alignment: step i (1-based) sits at 1 + (i-1)*stride, so the
        // integer-division remainder is dropped from the noisy end.
        let stride = train_steps / ddim_steps;
        let timestep_map = (0..ddim_steps).map(|i| 1 + i * stride).collect();

        Ok(Self {
            betas,
            alpha_bars,
            timestep_map,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn ddim_steps(&self) -> usize {
        self.timestep_map.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for training timesteps `1..=train_steps`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn timestep_map(&self) -> &[usize] {
        &self.timestep_map
    }

    /// `ᾱ` at a training timestep; timestep `0` is the clean boundary (`1.0`).
    pub fn alpha_bar(&self, timestep: usize) -> Result<f64> {
        match timestep {
            0 => Ok(1.0),
            t if t <= self.alpha_bars.len() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::StepOutOfRange {
                index: t,
                max: self.alpha_bars.len(),
            }),
        }
    }

    /// Training timestep for a DDIM step index; step `0` maps to timestep `0`.
    pub fn timestep(&self, step: usize) -> Result<usize> {
        match step {
            0 => Ok(0),
            s if s <= self.timestep_map.len() => Ok(self.timestep_map[s - 1]),
            s => Err(Error::StepOutOfRange {
                index: s,
                max: self.timestep_map.len(),
            }),
        }
    }

    /// `ᾱ` at a DDIM step index in `0..=T`.
    pub fn alpha_bar_at_step(&self, step: usize) -> Result<f64> {
        self.alpha_bar(self.timestep(step)?)
    }

    /// Writes one `t beta alpha_bar` row per training step.
    ///
    /// Values are printed in Rust's shortest round-trip form, so [`Self::load`]
    /// reproduces the schedule bit for bit.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# train_steps={} ddim_steps={}",
            self.train_steps(),
            self.ddim_steps()
        );
        let _ = writeln!(out, "# t\tbeta\talpha_bar");
        for (i, (b, a)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            let _ = writeln!(out, "{}\t{b:e}\t{a:e}", i + 1);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ddim_steps = None;
        let mut betas = Vec::new();
        let mut alpha_bars = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("ddim_steps=") {
                        ddim_steps = Some(v.parse::<usize>().map_err(|e| {
                            Error::Schedule(format!("line {}: ddim_steps: {e}", lineno + 1))
                        })?);
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(Error::Schedule(format!(
                    "line {}: expected 3 columns, found {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Schedule(format!("line {}: {e}", lineno + 1)))
            };
            let t: usize = cols[0]
                .parse()
                .map_err(|e| Error::Schedule(format!("line {}: {e}", lineno + 1)))?;
            if t != betas.len() + 1 {
                return Err(Error::Schedule(format!(
                    "line {}: timestep {t} out of sequence",
                    lineno + 1
                )));
            }
            betas.push(parse(cols[1])?);
            alpha_bars.push(parse(cols[2])?);
        }
        let ddim_steps =
            ddim_steps.ok_or_else(|| Error::Schedule("missing ddim_steps header".into()))?;
        let schedule = Self::new(betas.len(), ddim_steps, &BetaSchedule::Custom(betas))?;
        for (t, (stored, recomputed)) in alpha_bars.iter().zip(&schedule.alpha_bars).enumerate() {
            if stored != recomputed {
                return Err(Error::Schedule(format!(
                    "alpha_bar at t={} is {stored}, recomputed {recomputed}",
                    t + 1
                )));
            }
        }
        Ok(schedule)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
