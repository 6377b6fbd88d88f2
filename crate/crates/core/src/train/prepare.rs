use std::path::PathBuf;

use rayon::prelude::*;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::freqnet::{self, FreqFeatures, FEATURE_LEN, FREQUENCIES};
use crate::model::{Layout, ModelConfig};
use crate::pixelnet::{self, PixelNorm};
use crate::tensor::{Rng, Tensor};

/// Network inputs computed once per image: frequency features and the
/// resized `[0, 1]` pixel tensor (before standardization).
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub paths: Vec<PathBuf>,
    pub labels: Vec<u8>,
    pub freq: Option<Vec<FreqFeatures>>,
    pub pixels: Option<Vec<Tensor>>,
}

/// Which inputs to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub freq: bool,
    pub pixel: bool,
}

impl Needs {
    pub const ALL: Needs = Needs { freq: true, pixel: true };

    pub fn of(layout: &Layout) -> Self {
        Self {
            freq: layout.freq,
            pixel: layout.pixel.is_some(),
        }
    }
}

impl PreparedSet {
    /// Decodes every sample (in parallel, results kept in input order).
    pub fn build(samples: &[ImageSample], cfg: &ModelConfig, needs: Needs) -> Result<Self> {
        let items: Vec<(Option<FreqFeatures>, Option<Tensor>)> = samples
            .par_iter()
            .map(|s| {
                let (img, luma) = s.load_with_luma()?;
                let ingest = |e: Error| match e {
                    Error::Ingest { .. } | Error::Io { .. } => e,
                    other => Error::Ingest {
                        path: s.path.clone(),
                        reason: other.to_string(),
                    },
                };
                let f = needs
                    .freq
                    .then(|| freqnet::extract_plane(&luma, cfg.sampling))
                    .transpose()
                    .map_err(ingest)?;
                let p = needs
                    .pixel
                    .then(|| pixelnet::to_unit_tensor(&img, cfg.image_size))
                    .transpose()
                    .map_err(ingest)?;
                Ok((f, p))
            })
            .collect::<Result<_>>()?;
        let (freq, pixels): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        Ok(Self {
            paths: samples.iter().map(|s| s.path.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            freq: needs.freq.then(|| freq.into_iter().map(|f| f.expect("computed")).collect()),
            pixels: needs.pixel.then(|| pixels.into_iter().map(|p| p.expect("computed")).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            paths: idx.iter().map(|&i| self.paths[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            freq: self.freq.as_ref().map(|f| idx.iter().map(|&i| f[i].clone()).collect()),
            pixels: self.pixels.as_ref().map(|p| idx.iter().map(|&i| p[i].clone()).collect()),
        }
    }

    pub fn check(&self, needs: Needs) -> Result<()> {
        if needs.freq && self.freq.is_none() {
            return Err(Error::Config("frequency features were not prepared".into()));
        }
        if needs.pixel && self.pixels.is_none() {
            return Err(Error::Config("pixel tensors were not prepared".into()));
        }
        Ok(())
    }

    /// `[batch x 64 x 250]`.
    pub fn freq_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let f = self
            .freq
            .as_ref()
            .ok_or_else(|| Error::Config("frequency features were not prepared".into()))?;
        let mut data = Vec::with_capacity(idx.len() * FREQUENCIES * FEATURE_LEN);
        for &i in idx {
            data.extend_from_slice(f[i].as_slice());
        }
        Tensor::new([idx.len(), FREQUENCIES, FEATURE_LEN], data)
    }

    /// `[batch x 3 x s x s]`, standardized, optionally augmented first.
    pub fn pixel_batch(&self, idx: &[usize], norm: &PixelNorm, augment: Option<&mut Rng>) -> Result<Tensor> {
        let p = self
            .pixels
            .as_ref()
            .ok_or_else(|| Error::Config("pixel tensors were not prepared".into()))?;
        let shape = p[idx[0]].shape().to_vec();
        let mut data = Vec::with_capacity(idx.len() * p[idx[0]].len());
        let mut rng = augment;
        for &i in idx {
            let mut t = match rng.as_deref_mut() {
                Some(r) => pixelnet::augment(&p[i], r),
                None => p[i].clone(),
            };
            norm.apply(&mut t);
            data.extend_from_slice(t.data());
        }
        let mut full = vec![idx.len()];
        full.extend(shape);
        Tensor::new(full, data)
    }
}
