use std::io::{Read, Write};

use super::features::{FreqFeatures, RowMatrix, FEATURE_LEN, FREQUENCIES};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MVNF";
pub const FEATURE_VERSION: u16 = 1;

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "feature file".into(),
        reason: reason.into(),
    }
}

/// `MVNF`, version (u16 LE), count (u32 LE), then each 64 x 250 matrix
/// row-major as f32 LE.
pub fn write_features<W: Write>(out: &mut W, features: &[FreqFeatures]) -> std::io::Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&(features.len() as u32).to_le_bytes())?;
    for f in features {
        for &v in f.as_slice() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_features<R: Read>(input: &mut R) -> Result<Vec<FreqFeatures>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| malformed(e.to_string()))?;
    if bytes.len() < 10 || &bytes[..4] != FEATURE_MAGIC {
        return Err(malformed("missing MVNF magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let per = FREQUENCIES * FEATURE_LEN * 4;
    if bytes.len() != 10 + count * per {
        return Err(malformed(format!("expected {count} matrices, found {} bytes", bytes.len() - 10)));
    }
    bytes[10..]
        .chunks_exact(per)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            FreqFeatures::from_matrix(RowMatrix {
                rows: FREQUENCIES,
                cols: FEATURE_LEN,
                data,
            })
        })
        .collect()
}
