//! Procedural test clips.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::video::{save_frames, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// A bright square sliding right over a vertical gradient.
    MovingSquare,
    /// Diagonal colour bands panning across the frame.
    PanningBands,
    /// A soft disc that grows and changes hue.
    PulsingDisc,
}

impl Fixture {
    pub const ALL: [Fixture; 3] = [Fixture::MovingSquare, Fixture::PanningBands, Fixture::PulsingDisc];

    pub fn name(&self) -> &'static str {
        match self {
            Fixture::MovingSquare => "moving-square",
            Fixture::PanningBands => "panning-bands",
            Fixture::PulsingDisc => "pulsing-disc",
        }
    }

    /// Frame `index` of a clip of `len` frames at `size × size`.
    pub fn frame(&self, index: usize, len: usize, size: usize) -> Frame {
        let t = index as f64 / len.max(1) as f64;
        let s = size as f64;
        match self {
            Fixture::MovingSquare => {
                let side = s / 4.0;
                let x0 = t * (s - side);
                let y0 = s / 3.0;
                Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                    let (xf, yf) = (x as f64, y as f64);
                    if xf >= x0 && xf < x0 + side && yf >= y0 && yf < y0 + side {
                        [0.95, 0.85, 0.2][c]
                    } else {
                        0.15 + 0.5 * yf / s * [0.4, 0.7, 1.0][c]
                    }
                })
            }
            Fixture::PanningBands => Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                let phase = (x as f64 + 0.5 * y as f64) / s * std::f64::consts::TAU + t * 2.0 + c as f64;
                0.5 + 0.35 * phase.sin()
            }),
            Fixture::PulsingDisc => {
                let radius = s * (0.15 + 0.15 * t);
                let hue = [0.8 - 0.5 * t, 0.3 + 0.4 * t, 0.5];
                Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                    let d = ((x as f64 - s / 2.0).powi(2) + (y as f64 - s / 2.0).powi(2)).sqrt();
                    let inside = 1.0 / (1.0 + ((d - radius) / (0.05 * s)).exp());
                    0.1 + inside * hue[c]
                })
            }
        }
    }

    pub fn clip(&self, len: usize, size: usize) -> Vec<Frame> {
        (0..len).map(|i| self.frame(i, len, size)).collect()
    }

    /// Writes the clip as numbered PNGs into `dir`.
    pub fn write(&self, dir: &Path, len: usize, size: usize) -> Result<()> {
        save_frames(&self.clip(len, size), dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_in_range_and_move() {
        for f in Fixture::ALL {
            let clip = f.clip(4, 16);
            assert!(clip.iter().flat_map(|x| x.iter()).all(|v| (0.0..=1.0).contains(v)), "{}", f.name());
            assert_ne!(clip[0], clip[3], "{}", f.name());
        }
    }

    #[test]
    fn written_clip_reloads() {
        let dir = tempfile::tempdir().unwrap();
        Fixture::MovingSquare.write(dir.path(), 3, 16).unwrap();
        assert_eq!(crate::video::load_frames(dir.path()).unwrap().len(), 3);
    }
}
