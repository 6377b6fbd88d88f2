use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, MvnnModel};
use crate::pixelnet::PixelNorm;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MVNN";
pub const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    ablation: Ablation,
    seed: u64,
    pixel_norm: PixelNorm,
    train: Option<TrainConfig>,
    params: Vec<ParamEntry>,
}

/// A trained model and the configuration that produced it.
///
/// Layout: `MVNN`, version (u16 LE), header length (u32 LE), JSON header,
/// then every parameter's values as f64 LE in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MvnnModel,
    pub train: Option<TrainConfig>,
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint".into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let header = Header {
            config: m.config.clone(),
            ablation: m.ablation,
            seed: m.seed,
            pixel_norm: m.pixel_norm,
            train: self.train.clone(),
            params: m
                .params
                .iter()
                .map(|(name, p)| ParamEntry {
                    name: name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + 8 * m.params.iter().map(|(_, p)| p.tensor.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in m.params.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(malformed("missing MVNN magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(10..10 + len).ok_or_else(|| malformed("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| malformed(e.to_string()))?;
        header.config.validate()?;
        let mut payload = bytes[10 + len..].chunks_exact(8);
        let mut params = ParamStore::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let data = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<_>>();
            if data.len() != n {
                return Err(malformed(format!("payload ends inside `{}`", entry.name)));
            }
            params.insert(entry.name, Tensor::new(entry.shape, data)?, entry.trainable);
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(malformed("trailing bytes after parameters"));
        }
        Ok(Self {
            model: MvnnModel {
                config: header.config,
                ablation: header.ablation,
                params,
                pixel_norm: header.pixel_norm,
                seed: header.seed,
            },
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
