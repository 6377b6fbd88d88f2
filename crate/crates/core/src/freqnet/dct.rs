use std::f64::consts::PI;
use std::sync::OnceLock;

use std::io::Cursor;

use image::RgbImage;
use zune_jpeg::zune_core::colorspace::ColorSpace;
use zune_jpeg::zune_core::options::DecoderOptions;
use zune_jpeg::JpegDecoder;

use crate::error::{Error, Result};

pub const BLOCK: usize = 8;
pub const COEFFS: usize = BLOCK * BLOCK;

/// Natural (row-major) index of the coefficient at each zig-zag position.
pub const ZIGZAG: [usize; COEFFS] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20,
    13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59,
    52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// DCT coefficients of every 8x8 block of the level-shifted luminance plane,
/// blocks in raster order, coefficients row-major (vertical frequency first).
#[derive(Clone, Debug, PartialEq)]
pub struct DctBlockGrid {
    pub blocks: Vec<[f64; COEFFS]>,
    pub blocks_wide: usize,
    pub blocks_high: usize,
}

impl DctBlockGrid {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// `basis[u][x] = a(u) cos((2x + 1) u pi / 16)`, the orthonormal DCT-II matrix.
fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; BLOCK]; BLOCK];
        for (u, row) in m.iter_mut().enumerate() {
            let a = if u == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * PI / (2 * BLOCK) as f64).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D DCT-II of one block, computed separably.
pub fn dct_block(block: &[f64; COEFFS]) -> [f64; COEFFS] {
    let c = basis();
    let mut tmp = [0.0; COEFFS];
    // rows: tmp[y][u] = sum_x c[u][x] b[y][x]
    for y in 0..BLOCK {
        for u in 0..BLOCK {
            tmp[y * BLOCK + u] = (0..BLOCK).map(|x| c[u][x] * block[y * BLOCK + x]).sum();
        }
    }
    let mut out = [0.0; COEFFS];
    for v in 0..BLOCK {
        for u in 0..BLOCK {
            out[v * BLOCK + u] = (0..BLOCK).map(|y| c[v][y] * tmp[y * BLOCK + u]).sum();
        }
    }
    out
}

/// Inverse of [`dct_block`].
pub fn idct_block(coeffs: &[f64; COEFFS]) -> [f64; COEFFS] {
    let c = basis();
    let mut tmp = [0.0; COEFFS];
    for v in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[v * BLOCK + x] = (0..BLOCK).map(|u| c[u][x] * coeffs[v * BLOCK + u]).sum();
        }
    }
    let mut out = [0.0; COEFFS];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y * BLOCK + x] = (0..BLOCK).map(|v| c[v][y] * tmp[v * BLOCK + x]).sum();
        }
    }
    out
}

/// BT.601 luma minus 128, row-major.
pub fn luminance(image: &RgbImage) -> Vec<f64> {
    image
        .pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64 - 128.0)
        .collect()
}

/// Block DCT of a level-shifted luminance plane; the plane is edge-replicated
/// up to a multiple of 8 in each direction.
pub fn block_dct_plane(plane: &[f64], width: usize, height: usize) -> Result<DctBlockGrid> {
    if width == 0 || height == 0 || plane.len() != width * height {
        return Err(Error::dim(format!(
            "luminance plane of {} values for {width}x{height}",
            plane.len()
        )));
    }
    let blocks_wide = width.div_ceil(BLOCK);
    let blocks_high = height.div_ceil(BLOCK);
    let mut blocks = Vec::with_capacity(blocks_wide * blocks_high);
    for by in 0..blocks_high {
        for bx in 0..blocks_wide {
            let mut block = [0.0; COEFFS];
            for y in 0..BLOCK {
                let sy = (by * BLOCK + y).min(height - 1);
                for x in 0..BLOCK {
                    let sx = (bx * BLOCK + x).min(width - 1);
                    block[y * BLOCK + x] = plane[sy * width + sx];
                }
            }
            blocks.push(dct_block(&block));
        }
    }
    Ok(DctBlockGrid {
        blocks,
        blocks_wide,
        blocks_high,
    })
}

pub fn block_dct(image: &RgbImage) -> Result<DctBlockGrid> {
    LumaPlane::from_rgb(image).block_dct()
}

/// Level-shifted luminance, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LumaPlane {
    pub fn from_rgb(image: &RgbImage) -> Self {
        Self {
            width: image.width() as usize,
            height: image.height() as usize,
            data: luminance(image),
        }
    }

    /// The Y channel exactly as stored in a JPEG stream, without the round
    /// trip through RGB.
    pub fn from_jpeg(bytes: &[u8]) -> Result<Self> {
        let options = DecoderOptions::default().jpeg_set_out_colorspace(ColorSpace::Luma);
        let mut decoder = JpegDecoder::new_with_options(Cursor::new(bytes), options);
        let bad = |reason: String| Error::Format {
            what: "JPEG stream".into(),
            reason,
        };
        let y = decoder.decode().map_err(|e| bad(format!("{e:?}")))?;
        let info = decoder.info().ok_or_else(|| bad("missing header".into()))?;
        let (width, height) = (info.width as usize, info.height as usize);
        if y.len() != width * height {
            return Err(bad(format!("{} luma samples for {width}x{height}", y.len())));
        }
        Ok(Self {
            width,
            height,
            data: y.into_iter().map(|v| f64::from(v) - 128.0).collect(),
        })
    }

    pub fn block_dct(&self) -> Result<DctBlockGrid> {
        block_dct_plane(&self.data, self.width, self.height)
    }
}
