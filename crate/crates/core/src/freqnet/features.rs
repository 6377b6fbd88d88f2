use std::sync::Arc;

use image::RgbImage;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::dct::{DctBlockGrid, LumaPlane, COEFFS, ZIGZAG};
use crate::error::{Error, Result};

/// Smallest rounded coefficient value with its own histogram bin.
pub const HIST_MIN: i64 = -250;
/// Raw histogram bins covering `[-250, 249]`.
pub const RAW_BINS: usize = 500;
/// Columns per frequency row fed to the network.
pub const FEATURE_LEN: usize = 250;
pub const FREQUENCIES: usize = COEFFS;

/// Row-major `rows x cols` matrix of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// How a raw row is reduced to [`FEATURE_LEN`] points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every `len / 250`-th value.
    #[default]
    Stride,
    /// Linear interpolation at 250 evenly spaced positions spanning the row.
    Interpolate,
}

/// The 64 x 250 matrix of Fourier-enhanced coefficient histograms, one row per
/// zig-zag frequency, each row max-normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqFeatures(RowMatrix);

impl FreqFeatures {
    pub fn from_matrix(m: RowMatrix) -> Result<Self> {
        if m.rows != FREQUENCIES || m.cols != FEATURE_LEN || m.data.len() != FREQUENCIES * FEATURE_LEN {
            return Err(Error::dim(format!(
                "frequency features must be {FREQUENCIES}x{FEATURE_LEN}, got {}x{}",
                m.rows, m.cols
            )));
        }
        if m.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric("frequency features must be finite and non-negative".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &RowMatrix {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0.data
    }
}

/// Per-frequency histograms (zig-zag row order) of rounded coefficients over
/// all blocks, integer bins on `[-250, 249]`, out-of-range values clamped.
pub fn coefficient_histograms(grid: &DctBlockGrid) -> Result<RowMatrix> {
    if grid.is_empty() {
        return Err(Error::Usage("coefficient histogram of an empty block grid".into()));
    }
    let mut hist = RowMatrix::zeros(FREQUENCIES, RAW_BINS);
    for block in &grid.blocks {
        for (row, &natural) in ZIGZAG.iter().enumerate() {
            let v = block[natural].round() as i64;
            let bin = (v - HIST_MIN).clamp(0, RAW_BINS as i64 - 1) as usize;
            hist.data[row * RAW_BINS + bin] += 1.0;
        }
    }
    Ok(hist)
}

/// Magnitude of the discrete Fourier transform of every row.
pub fn fourier_enhance(hist: &RowMatrix) -> RowMatrix {
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(hist.cols);
    let mut out = RowMatrix::zeros(hist.rows, hist.cols);
    let mut buf = vec![Complex::new(0.0, 0.0); hist.cols];
    for r in 0..hist.rows {
        for (b, &v) in buf.iter_mut().zip(hist.row(r)) {
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (o, b) in out.row_mut(r).iter_mut().zip(&buf) {
            *o = b.norm();
        }
    }
    out
}

/// Reduces every row to 250 points and scales it by its maximum. All-zero
/// rows stay zero.
pub fn sample_to_250(enhanced: &RowMatrix, mode: Sampling) -> Result<FreqFeatures> {
    let len = enhanced.cols;
    if len < FEATURE_LEN {
        return Err(Error::Config(format!(
            "rows of length {len} cannot be sampled to {FEATURE_LEN}"
        )));
    }
    let mut out = RowMatrix::zeros(enhanced.rows, FEATURE_LEN);
    for r in 0..enhanced.rows {
        let src = enhanced.row(r);
        let dst = out.row_mut(r);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = match mode {
                Sampling::Stride => src[i * len / FEATURE_LEN],
                Sampling::Interpolate => {
                    let pos = i as f64 * (len - 1) as f64 / (FEATURE_LEN - 1) as f64;
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(len - 1);
                    let t = pos - lo as f64;
                    src[lo] * (1.0 - t) + src[hi] * t
                }
            };
        }
        let max = dst.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            dst.iter_mut().for_each(|v| *v /= max);
        }
    }
    FreqFeatures::from_matrix(out)
}

/// Full extraction pipeline: block DCT, histograms, Fourier magnitude, sampling.
pub fn extract(image: &RgbImage, mode: Sampling) -> Result<FreqFeatures> {
    extract_plane(&LumaPlane::from_rgb(image), mode)
}

pub fn extract_plane(plane: &LumaPlane, mode: Sampling) -> Result<FreqFeatures> {
    let hist = coefficient_histograms(&plane.block_dct()?)?;
    sample_to_250(&fourier_enhance(&hist), mode)
}
