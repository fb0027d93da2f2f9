//! Small frozen layers shared by the toy networks.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One standard-normal draw.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// 2-D convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
}

impl Conv2d {
    /// He-style init scaled by `gain`.
    pub fn random<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool, gain: f64) -> Self {
        let std = gain * (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = Array4::from_shape_fn((c_out, c_in, kernel, kernel), |_| std * normal(rng));
        let bias = bias.then(|| Array1::from_shape_fn(c_out, |_| 0.02 * normal(rng)));
        Self { weight, bias, stride }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        let pad = k / 2;
        (
            (h + 2 * pad - k) / self.stride + 1,
            (w + 2 * pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
        let (c_out, c_in, k, _) = self.weight.dim();
        let (c, h, w) = x.dim();
        if c != c_in {
            return Err(Error::shape(format!("{c_in} input channels"), format!("{c}")));
        }
        let pad = k / 2;
        let (ho, wo) = self.output_size(h, w);
        let mut padded = Array3::<f64>::zeros((c, h + 2 * pad, w + 2 * pad));
        padded.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(&x);

        // im2col: rows are (channel, ky, kx), columns are output pixels.
        let st = self.stride as isize;
        let mut cols = Array2::<f64>::zeros((c_in * k * k, ho * wo));
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let patch = padded.slice(s![
                        ci,
                        ky..ky + self.stride * (ho - 1) + 1;st,
                        kx..kx + self.stride * (wo - 1) + 1;st
                    ]);
                    let row = (ci * k + ky) * k + kx;
                    cols.row_mut(row)
                        .assign(&patch.to_shape(ho * wo).expect("contiguous patch"));
                }
            }
        }
        let wmat = self
            .weight
            .to_shape((c_out, c_in * k * k))
            .expect("standard layout weight");
        let mut out = wmat.dot(&cols);
        if let Some(b) = &self.bias {
            out += &b.view().insert_axis(Axis(1));
        }
        Ok(out.into_shape_with_order((c_out, ho, wo)).expect("sized for output"))
    }
}

/// Dense layer `y = W x (+ b)` applied to token rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn random<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Self {
        Self {
            weight: random_matrix(rng, d_out, d_in, gain),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut y = self.weight.dot(x);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }
}

/// Gaussian `(rows, cols)` matrix with variance `gain² / cols`.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let std = gain / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| std * normal(rng))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Normalizes each token row to zero mean and unit variance.
pub fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Normalizes a whole feature map to zero mean and unit variance.
pub fn instance_norm(x: &Array3<f64>) -> Array3<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.mapv(|v| (v - mean) * inv)
}

/// `(C, H, W)` → `(H·W, C)`.
pub fn to_tokens(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w))
        .expect("feature map")
        .t()
        .as_standard_layout()
        .into_owned()
}

/// `(H·W, C)` → `(C, H, W)`.
pub fn from_tokens(t: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = t.ncols();
    t.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count matches h·w")
}

pub fn upsample_nearest(x: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ci, y, xx)| x[[ci, y / factor, xx / factor]])
}

pub fn avg_pool(x: ArrayView3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    Array3::from_shape_fn((c, ho, wo), |(ci, y, xx)| {
        x.slice(s![ci, y * factor..(y + 1) * factor, xx * factor..(xx + 1) * factor])
            .sum()
            / norm
    })
}

/// Sinusoidal embedding of a training timestep.
pub fn timestep_embedding(timestep: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = timestep as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}
