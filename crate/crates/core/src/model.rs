//! Model configuration, ablation variants and parameter initialization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqnet::{self, Sampling};
use crate::fusion;
use crate::pixelnet::{self, PixelNorm};
use crate::tensor::{ParamStore, Rng, Tensor};

/// Layer sizes of the three sub-networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square pixel-branch input.
    pub image_size: usize,
    /// Filters of the three 1-D conv blocks; must strictly increase.
    pub freq_filters: Vec<usize>,
    pub freq_kernel: usize,
    pub freq_pool: usize,
    /// Width of the shared per-frequency FC (`w_i`).
    pub freq_row_dim: usize,
    /// Width of `l0`, of every branch vector `v_t`, and of `u`.
    pub feature_dim: usize,
    pub freq_dropout: f64,
    /// Channels of the four pixel blocks.
    pub pixel_widths: Vec<usize>,
    /// Channels of the 1x1 conv in each branch tap.
    pub tap_channels: usize,
    pub pixel_dropout: f64,
    /// Hidden units per GRU direction.
    pub gru_hidden: usize,
    pub attention_dim: usize,
    pub sampling: Sampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            freq_filters: vec![32, 64, 128],
            freq_kernel: 3,
            freq_pool: 2,
            freq_row_dim: 16,
            feature_dim: 64,
            freq_dropout: 0.4,
            pixel_widths: vec![32, 64, 128, 128],
            tap_channels: 16,
            pixel_dropout: 0.5,
            gru_hidden: 32,
            attention_dim: 32,
            sampling: Sampling::Stride,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and a 32x32 pixel input for single-core experiments.
    /// Feature, GRU and attention widths are unchanged.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            freq_filters: vec![4, 8, 16],
            freq_pool: 4,
            pixel_widths: vec![8, 16, 16, 16],
            tap_channels: 4,
            ..Self::default()
        }
    }

    /// A very small network used by the finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            freq_filters: vec![2, 3, 4],
            freq_kernel: 3,
            freq_pool: 4,
            freq_row_dim: 2,
            feature_dim: 4,
            pixel_widths: vec![2, 3, 3, 3],
            tap_channels: 1,
            gru_hidden: 2,
            attention_dim: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.freq_filters.len() != 3 {
            return bad(format!("expected 3 frequency conv blocks, got {}", self.freq_filters.len()));
        }
        if self.freq_filters.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("frequency filter counts must increase: {:?}", self.freq_filters));
        }
        if self.pixel_widths.len() != pixelnet::BLOCKS {
            return bad(format!("expected {} pixel blocks, got {}", pixelnet::BLOCKS, self.pixel_widths.len()));
        }
        if self.feature_dim != 2 * self.gru_hidden {
            return bad(format!(
                "feature_dim {} must equal twice gru_hidden {}",
                self.feature_dim, self.gru_hidden
            ));
        }
        if self.image_size < 1 << pixelnet::BLOCKS {
            return bad(format!("image_size {} too small for four 2x2 pools", self.image_size));
        }
        if freqnet::conv_output_len(self) == 0 {
            return bad("frequency pooling leaves no positions".into());
        }
        for rate in [self.freq_dropout, self.pixel_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("dropout rate {rate} outside [0, 1)"));
            }
        }
        let sizes = [
            self.freq_kernel,
            self.freq_pool,
            self.freq_row_dim,
            self.feature_dim,
            self.tap_channels,
            self.attention_dim,
        ];
        if sizes.contains(&0) || self.pixel_widths.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        Ok(())
    }
}

/// Which components a model variant keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoFreq,
    NoPixel,
    NoAttention,
    NoBigru,
    NoBranches,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoFreq,
        Ablation::NoPixel,
        Ablation::NoAttention,
        Ablation::NoBigru,
        Ablation::NoBranches,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFreq => "no_freq",
            Ablation::NoPixel => "no_pixel",
            Ablation::NoAttention => "no_attention",
            Ablation::NoBigru => "no_bigru",
            Ablation::NoBranches => "no_branches",
        }
    }

    pub fn layout(self) -> Layout {
        let pixel = PixelLayout {
            branches: true,
            bigru: true,
        };
        match self {
            Ablation::Full => Layout {
                freq: true,
                pixel: Some(pixel),
                fusion: FusionMode::Attention,
            },
            Ablation::NoFreq => Layout {
                freq: false,
                pixel: Some(pixel),
                fusion: FusionMode::Attention,
            },
            Ablation::NoPixel => Layout {
                freq: true,
                pixel: None,
                fusion: FusionMode::Direct,
            },
            Ablation::NoAttention => Layout {
                freq: true,
                pixel: Some(pixel),
                fusion: FusionMode::Concat,
            },
            Ablation::NoBigru => Layout {
                freq: true,
                pixel: Some(PixelLayout {
                    branches: true,
                    bigru: false,
                }),
                fusion: FusionMode::Attention,
            },
            Ablation::NoBranches => Layout {
                freq: true,
                pixel: Some(PixelLayout {
                    branches: false,
                    bigru: false,
                }),
                fusion: FusionMode::Attention,
            },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown ablation `{s}` (expected one of full, no_freq, no_pixel, no_attention, no_bigru, no_branches)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelLayout {
    /// All four taps feed the sequence; otherwise only the last block's tap.
    pub branches: bool,
    pub bigru: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Attention over all available feature vectors.
    Attention,
    /// Concatenate all feature vectors into one classifier input.
    Concat,
    /// Single feature vector straight into the classifier.
    Direct,
}

/// Structural description of a network: which sub-networks run and how
/// their outputs are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub freq: bool,
    pub pixel: Option<PixelLayout>,
    pub fusion: FusionMode,
}

impl Layout {
    /// Number of feature vectors handed to the fusion sub-network.
    pub fn feature_count(&self) -> usize {
        let pixel = match self.pixel {
            Some(p) if p.branches => pixelnet::BLOCKS,
            Some(_) => 1,
            None => 0,
        };
        usize::from(self.freq) + pixel
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.feature_count();
        if n == 0 {
            return Err(Error::Config("layout has neither sub-network".into()));
        }
        if self.fusion == FusionMode::Direct && n != 1 {
            return Err(Error::Config(format!("direct fusion needs exactly one feature vector, got {n}")));
        }
        if let Some(p) = self.pixel {
            if p.bigru && !p.branches {
                return Err(Error::Config("the Bi-GRU needs all four branches".into()));
            }
        }
        Ok(())
    }

    /// Frequency trunk only, classifier on `l0`.
    pub fn freq_only() -> Self {
        Layout {
            freq: true,
            pixel: None,
            fusion: FusionMode::Direct,
        }
    }

    /// Same pixel trunk with attention over its own features.
    pub fn pixel_only(&self) -> Option<Self> {
        self.pixel.map(|p| Layout {
            freq: false,
            pixel: Some(p),
            fusion: FusionMode::Attention,
        })
    }
}

/// Uniform `±sqrt(6 / fan_in)`, for layers followed by ReLU.
pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

pub(crate) fn insert_batchnorm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full([channels], 1.0), true);
    store.insert(format!("{prefix}.beta"), Tensor::zeros([channels]), true);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros([channels]), false);
    store.insert(format!("{prefix}.running_var"), Tensor::full([channels], 1.0), false);
}

/// Stream of the parameter-initialization generator.
pub const INIT_STREAM: u64 = 1;

/// Fresh parameters for every component a layout uses.
pub fn init_params(config: &ModelConfig, layout: &Layout, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    layout.validate()?;
    let mut rng = Rng::derive(seed, INIT_STREAM);
    let mut store = ParamStore::new();
    if layout.freq {
        freqnet::init_params(config, &mut store, &mut rng);
    }
    if let Some(p) = layout.pixel {
        pixelnet::init_params(config, &p, &mut store, &mut rng);
    }
    fusion::init_params(config, layout, &mut store, &mut rng);
    Ok(store)
}

/// Every parameter of one network variant plus the input normalization it was
/// trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct MvnnModel {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamStore,
    pub pixel_norm: PixelNorm,
    pub seed: u64,
}

impl MvnnModel {
    pub fn new(config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        let params = init_params(&config, &ablation.layout(), seed)?;
        Ok(Self {
            config,
            ablation,
            params,
            pixel_norm: PixelNorm::identity(),
            seed,
        })
    }

    pub fn layout(&self) -> Layout {
        self.ablation.layout()
    }
}
