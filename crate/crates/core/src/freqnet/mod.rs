//! Frequency-domain sub-network: block DCT of the luminance plane, per-frequency
//! coefficient histograms, Fourier magnitude enhancement, fixed-size sampling,
//! and the shared 1-D CNN producing `l0`.

mod dct;
mod features;
mod io;
mod network;

pub use dct::{block_dct, block_dct_plane, dct_block, idct_block, luminance, DctBlockGrid, LumaPlane, BLOCK, COEFFS, ZIGZAG};
pub use features::{
    coefficient_histograms, extract, extract_plane, fourier_enhance, sample_to_250, FreqFeatures, RowMatrix, Sampling,
    FEATURE_LEN, FREQUENCIES, HIST_MIN, RAW_BINS,
};
pub use io::{read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use network::{conv_output_len, features_tensor, freqnet_forward, init_params, row_encodings};
