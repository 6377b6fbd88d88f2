use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Per-channel standardization of `[0, 1]` pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl PixelNorm {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Channel mean and population standard deviation over every pixel of
    /// `images` (each `[3 x h x w]`, unstandardized). Flat channels get std 1.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for t in images {
            if t.ndim() != 3 || t.shape()[0] != 3 {
                return Err(Error::dim(format!("expected [3 x h x w], got {:?}", t.shape())));
            }
            let plane = t.shape()[1] * t.shape()[2];
            for (c, chunk) in t.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Usage("cannot fit pixel statistics on zero images".into()));
        }
        let n = count as f64;
        let mut norm = Self::identity();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            norm.mean[c] = mean;
            norm.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(norm)
    }

    pub fn apply(&self, t: &mut Tensor) {
        let plane = t.len() / 3;
        for (c, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Bilinear resize to `size x size` and scale to `[0, 1]`, channel-major
/// `[3 x size x size]`. No standardization.
pub fn to_unit_tensor(image: &RgbImage, size: usize) -> Result<Tensor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::dim("image has no pixels"));
    }
    let side = size as u32;
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    if image.dimensions() == (side, side) {
        for (i, px) in image.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px.0[c]) / 255.0;
            }
        }
    } else {
        let float: Rgb32FImage = DynamicImage::ImageRgb8(image.clone()).into_rgb32f();
        let resized = imageops::resize(&float, side, side, FilterType::Triangle);
        for (i, px) in resized.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px.0[c]).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], data)
}

/// Network input for one image: resized, scaled and standardized.
pub fn pixel_preprocess(image: &RgbImage, size: usize, norm: &PixelNorm) -> Result<Tensor> {
    let mut t = to_unit_tensor(image, size)?;
    norm.apply(&mut t);
    Ok(t)
}

/// Training-time augmentation of a `[3 x s x s]` tensor: horizontal flip with
/// probability 0.5, then a random square crop covering 80-100% of the side
/// resized back to `s` bilinearly.
pub fn augment(t: &Tensor, rng: &mut Rng) -> Tensor {
    let s = t.shape()[1];
    let flip = rng.uniform() < 0.5;
    let crop = ((s as f64) * rng.uniform_range(0.8, 1.0)).round().clamp(1.0, s as f64) as usize;
    let x0 = rng.below(s - crop + 1) as f64;
    let y0 = rng.below(s - crop + 1) as f64;
    let scale = crop as f64 / s as f64;
    let plane = s * s;
    let src = t.data();
    let mut out = vec![0.0; 3 * plane];
    for y in 0..s {
        let sy = (y0 + (y as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
        let (y1, fy) = (sy.floor() as usize, sy.fract());
        let y2 = (y1 + 1).min(s - 1);
        for x in 0..s {
            let sx = (x0 + (x as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
            let (x1, fx) = (sx.floor() as usize, sx.fract());
            let x2 = (x1 + 1).min(s - 1);
            let dst_x = if flip { s - 1 - x } else { x };
            for c in 0..3 {
                let p = &src[c * plane..(c + 1) * plane];
                let top = p[y1 * s + x1] * (1.0 - fx) + p[y1 * s + x2] * fx;
                let bottom = p[y2 * s + x1] * (1.0 - fx) + p[y2 * s + x2] * fx;
                out[c * plane + y * s + dst_x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape as input")
}
