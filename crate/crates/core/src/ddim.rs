//! Deterministic DDIM updates.
//!
//! Both directions are affine in `(z, ε)`:
//!
//! ```text
//! denoise  z_{t-1} = √(ᾱ_{t-1}/ᾱ_t) · z_t     + (√(1-ᾱ_{t-1}) - √(ᾱ_{t-1}·(1/ᾱ_t - 1)))     · ε
//! invert   z_t     = √(ᾱ_t/ᾱ_{t-1}) · z_{t-1} + (√(1-ᾱ_t)     - √(ᾱ_t·(1/ᾱ_{t-1} - 1))) · ε
//! ```
//!
//! i.e. predict the clean latent `(z - √(1-ᾱ)·ε)/√ᾱ` and re-noise it at the
//! neighbouring level with the same `ε`. With identical `ε` the two updates
//! are exact inverses. Each frame is updated independently.

use crate::error::{Error, Result};
use crate::latent::{Latent, LatentState};
use crate::schedule::NoiseSchedule;

/// The two scalars of one affine DDIM update: `out = scale·z + noise·ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub scale: f64,
    pub noise: f64,
}

impl DdimCoefficients {
    /// Coefficients moving from `ᾱ_t` down to `ᾱ_{t-1}`.
    pub fn denoise(alpha_bar_prev: f64, alpha_bar_t: f64) -> Self {
        Self {
            scale: (alpha_bar_prev / alpha_bar_t).sqrt(),
            noise: (1.0 - alpha_bar_prev).sqrt() - (alpha_bar_prev * (1.0 / alpha_bar_t - 1.0)).sqrt(),
        }
    }

    /// Coefficients moving from `ᾱ_{t-1}` up to `ᾱ_t`.
    pub fn invert(alpha_bar_prev: f64, alpha_bar_t: f64) -> Self {
        Self {
            scale: (alpha_bar_t / alpha_bar_prev).sqrt(),
            noise: (1.0 - alpha_bar_t).sqrt() - (alpha_bar_t * (1.0 / alpha_bar_prev - 1.0)).sqrt(),
        }
    }

    pub fn apply(&self, z: &Latent, eps: &Latent) -> Latent {
        let mut out = z * self.scale;
        out.scaled_add(self.noise, eps);
        out
    }
}

fn apply_frames(coeff: DdimCoefficients, z: &LatentState, eps: &[Latent], step: usize) -> Result<LatentState> {
    z.ensure_same_shape(eps)?;
    let frames = z
        .frames()
        .iter()
        .zip(eps)
        .map(|(zf, ef)| coeff.apply(zf, ef))
        .collect();
    LatentState::new(frames, step)
}

/// One denoising step from `z.step()` to `z.step() - 1`.
pub fn ddim_denoise_step(z: &LatentState, eps: &[Latent], sched: &NoiseSchedule) -> Result<LatentState> {
    let t = z.step();
    if t == 0 || t > sched.ddim_steps() {
        return Err(Error::StepOutOfRange {
            index: t,
            max: sched.ddim_steps(),
        });
    }
    let coeff = DdimCoefficients::denoise(sched.alpha_bar_at_step(t - 1)?, sched.alpha_bar_at_step(t)?);
    apply_frames(coeff, z, eps, t - 1)
}

/// One inversion step from `z.step()` to `z.step() + 1`.
pub fn ddim_invert_step(z: &LatentState, eps: &[Latent], sched: &NoiseSchedule) -> Result<LatentState> {
    let t = z.step() + 1;
    if t > sched.ddim_steps() {
        return Err(Error::StepOutOfRange {
            index: t,
            max: sched.ddim_steps(),
        });
    }
    let coeff = DdimCoefficients::invert(sched.alpha_bar_at_step(t - 1)?, sched.alpha_bar_at_step(t)?);
    apply_frames(coeff, z, eps, t)
}

/// Closed-form forward diffusion to a training timestep:
/// `√ᾱ_t · z_0 + √(1-ᾱ_t) · noise`.
pub fn forward_diffuse(z0: &[Latent], timestep: usize, noise: &[Latent], sched: &NoiseSchedule) -> Result<Vec<Latent>> {
    if z0.len() != noise.len() {
        return Err(Error::shape(format!("{} frames", z0.len()), format!("{} frames", noise.len())));
    }
    let a = sched.alpha_bar(timestep)?;
    z0.iter()
        .zip(noise)
        .map(|(z, n)| {
            if z.dim() != n.dim() {
                return Err(Error::shape(format!("{:?}", z.dim()), format!("{:?}", n.dim())));
            }
            let mut out = z * a.sqrt();
            out.scaled_add((1.0 - a).sqrt(), n);
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::BetaSchedule;
    use ndarray::{arr3, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-step schedule with ᾱ_1 = 0.9, ᾱ_2 = 0.8.
    fn nine_eight() -> NoiseSchedule {
        let b1 = 0.1;
        let b2 = 1.0 - 0.8 / 0.9;
        NoiseSchedule::new(2, 2, &BetaSchedule::Custom(vec![b1, b2])).unwrap()
    }

    fn state(values: &[f64], step: usize) -> LatentState {
        let f = Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap();
        LatentState::new(vec![f], step).unwrap()
    }

    fn zeros_like(s: &LatentState) -> Vec<Latent> {
        s.frames().iter().map(|f| Array3::zeros(f.dim())).collect()
    }

    fn random_state(rng: &mut ChaCha8Rng, k: usize, step: usize) -> LatentState {
        let frames = (0..k)
            .map(|_| Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(-2.0..2.0)))
            .collect();
        LatentState::new(frames, step).unwrap()
    }

    #[test]
    fn denoise_pure_scaling() {
        let s = nine_eight();
        assert!((s.alpha_bar_at_step(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar_at_step(2).unwrap() - 0.8).abs() < 1e-15);
        let z = state(&[1.0, 2.0], 2);
        let out = ddim_denoise_step(&z, &zeros_like(&z), &s).unwrap();
        // √1.125 = 1.0606601717798212
        let got = out.frames()[0].as_slice().unwrap();
        assert!((got[0] - 1.060_660_171_779_821_2).abs() < 1e-12);
        assert!((got[1] - 2.121_320_343_559_642_4).abs() < 1e-12);
        assert_eq!(out.step(), 1);
    }

    #[test]
    fn denoise_noise_coefficient() {
        let s = nine_eight();
        let z = state(&[0.0], 2);
        let eps = vec![arr3(&[[[1.0]]])];
        let out = ddim_denoise_step(&z, &eps, &s).unwrap();
        // √0.1 − √(0.9·0.25) = −0.158113883008418966 (mpmath, 30 digits)
        assert!((out.frames()[0][[0, 0, 0]] + 0.158_113_883_008_418_97).abs() < 1e-12);
    }

    #[test]
    fn equal_alpha_is_identity() {
        let c = DdimCoefficients::denoise(0.7, 0.7);
        assert_eq!(c.scale, 1.0);
        let z = arr3(&[[[1.5, -2.0]]]);
        assert_eq!(c.apply(&z, &Array3::zeros(z.dim())), z);

        let c = DdimCoefficients::invert(0.6, 0.6);
        assert_eq!(c.scale, 1.0);
        assert!(c.noise.abs() < 1e-15);
        let eps = arr3(&[[[3.0, 4.0]]]);
        let out = c.apply(&z, &eps);
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn invert_undoes_denoise_example() {
        let s = nine_eight();
        let z = state(&[1.060_660_171_779_821_2, 2.121_320_343_559_642_4], 1);
        let out = ddim_invert_step(&z, &zeros_like(&z), &s).unwrap();
        let got = out.frames()[0].as_slice().unwrap();
        assert!((got[0] - 1.0).abs() < 1e-12 && (got[1] - 2.0).abs() < 1e-12);
        assert_eq!(out.step(), 2);
    }

    #[test]
    fn step_range_and_shape_errors() {
        let s = nine_eight();
        let z = state(&[1.0], 0);
        assert!(ddim_denoise_step(&z, &zeros_like(&z), &s).is_err());
        let z = state(&[1.0], 2);
        assert!(ddim_invert_step(&z, &zeros_like(&z), &s).is_err());
        let z = state(&[1.0, 2.0], 2);
        let bad = vec![Array3::zeros((1, 1, 3))];
        assert!(matches!(ddim_denoise_step(&z, &bad, &s), Err(Error::Shape { .. })));
        assert!(matches!(ddim_denoise_step(&z, &[], &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::new(1000, 50, &BetaSchedule::toy_default()).unwrap();
        let z0 = vec![arr3(&[[[0.3, -1.2]]])];
        let noise = vec![arr3(&[[[5.0, 7.0]]])];
        assert_eq!(forward_diffuse(&z0, 0, &noise, &s).unwrap(), z0);

        // ᾱ_1 = 0.64, ᾱ_2 = 0.25
        let s = NoiseSchedule::new(2, 1, &BetaSchedule::Custom(vec![0.36, 1.0 - 0.25 / 0.64])).unwrap();
        let out = forward_diffuse(&z0, 2, &[Array3::zeros((1, 1, 2))], &s).unwrap();
        assert!((out[0][[0, 0, 0]] - 0.15).abs() < 1e-15);
        assert!((out[0][[0, 0, 1]] + 0.6).abs() < 1e-15);
        let one = vec![arr3(&[[[1.0]]])];
        let out = forward_diffuse(&one, 1, &one, &s).unwrap();
        assert!((out[0][[0, 0, 0]] - 1.4).abs() < 1e-15);
        assert!(forward_diffuse(&one, 1, &z0, &s).is_err());
    }

    #[test]
    fn closed_form_matches_iterated_mean() {
        let s = NoiseSchedule::new(1000, 50, &BetaSchedule::toy_default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = random_state(&mut rng, 2, 0).into_frames();
        let zeros: Vec<Latent> = z0.iter().map(|f| Array3::zeros(f.dim())).collect();
        let mut iterated = z0.clone();
        for t in 1..=1000 {
            let keep = (1.0 - s.betas()[t - 1]).sqrt();
            iterated.iter_mut().for_each(|f| *f *= keep);
            if t % 97 == 0 || t == 1000 {
                let closed = forward_diffuse(&z0, t, &zeros, &s).unwrap();
                for (a, b) in iterated.iter().zip(&closed) {
                    for (x, y) in a.iter().zip(b.iter()) {
                        assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-300), "t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_round_trip_is_identity() {
        let s = NoiseSchedule::new(1000, 50, &BetaSchedule::toy_default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for step in 1..=50 {
            let z = random_state(&mut rng, 2, step - 1);
            let zeros = zeros_like(&z);
            let up = ddim_invert_step(&z, &zeros, &s).unwrap();
            let back = ddim_denoise_step(&up, &zeros, &s).unwrap();
            assert_eq!(back.step(), step - 1);
            for (a, b) in z.frames().iter().zip(back.frames()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() <= 1e-10 * x.abs());
                }
            }
        }
    }

    #[test]
    fn frames_are_updated_independently() {
        let s = NoiseSchedule::new(1000, 50, &BetaSchedule::toy_default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_state(&mut rng, 3, 17);
        let eps = random_state(&mut rng, 3, 17).into_frames();
        let out = ddim_denoise_step(&z, &eps, &s).unwrap();
        let perm = [2usize, 0, 1];
        let zp = LatentState::new(perm.iter().map(|&i| z.frames()[i].clone()).collect(), 17).unwrap();
        let ep: Vec<Latent> = perm.iter().map(|&i| eps[i].clone()).collect();
        let outp = ddim_denoise_step(&zp, &ep, &s).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(outp.frames()[j], out.frames()[i]);
        }
    }

    proptest::proptest! {
        #[test]
        fn steps_are_linear(seed in 0u64..1000, c in -3.0f64..3.0, step in 1usize..=50) {
            let s = NoiseSchedule::new(1000, 50, &BetaSchedule::toy_default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_state(&mut rng, 2, step);
            let eps = random_state(&mut rng, 2, step).into_frames();
            let zc = LatentState::new(z.frames().iter().map(|f| f * c).collect(), step).unwrap();
            let ec: Vec<Latent> = eps.iter().map(|f| f * c).collect();
            let base = ddim_denoise_step(&z, &eps, &s).unwrap();
            let scaled = ddim_denoise_step(&zc, &ec, &s).unwrap();
            for (a, b) in base.frames().iter().zip(scaled.frames()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    proptest::prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
            let zi = LatentState::new(z.frames().to_vec(), step - 1).unwrap();
            let base = ddim_invert_step(&zi, &eps, &s).unwrap();
            let zci = LatentState::new(zc.frames().to_vec(), step - 1).unwrap();
            let scaled = ddim_invert_step(&zci, &ec, &s).unwrap();
            for (a, b) in base.frames().iter().zip(scaled.frames()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    proptest::prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
        }
    }
}
