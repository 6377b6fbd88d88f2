use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqnet::LumaPlane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    /// 0 real, 1 fake.
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// An image on disk with its label; pixels are decoded on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub path: PathBuf,
    pub label: u8,
    pub event_id: Option<u64>,
}

impl ImageSample {
    pub fn load(&self) -> Result<RgbImage> {
        load_rgb(&self.path)
    }

    pub fn load_with_luma(&self) -> Result<(RgbImage, LumaPlane)> {
        load_with_luma(&self.path)
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.into_rgb8())
}

/// Decodes an image once into RGB pixels and its luminance plane. JPEG files
/// give their stored Y channel; anything else gives BT.601 luma of the RGB.
pub fn load_with_luma(path: &Path) -> Result<(RgbImage, LumaPlane)> {
    let ingest = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rgb = image::load_from_memory(&bytes)
        .map_err(|e| ingest(e.to_string()))?
        .into_rgb8();
    if !bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        let luma = LumaPlane::from_rgb(&rgb);
        return Ok((rgb, luma));
    }
    let luma = LumaPlane::from_jpeg(&bytes).map_err(|e| ingest(e.to_string()))?;
    if (luma.width, luma.height) != (rgb.width() as usize, rgb.height() as usize) {
        return Err(ingest(format!(
            "luma plane {}x{} does not match image {}x{}",
            luma.width,
            luma.height,
            rgb.width(),
            rgb.height()
        )));
    }
    Ok((rgb, luma))
}

/// Records plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads JSON lines; blank lines are skipped. Relative paths resolve
    /// against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line).map_err(|e| Error::Format {
                what: "manifest".into(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            records.push(r);
        }
        Self::new(records, base_dir)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Unique paths, binary labels, and no event shared between splits.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::Format {
                what: "manifest".into(),
                reason,
            })
        };
        let mut seen = HashSet::new();
        let mut event_split: HashMap<u64, Split> = HashMap::new();
        for r in &self.records {
            if r.label > 1 {
                return bad(format!("{}: label {} is not 0 or 1", r.path.display(), r.label));
            }
            if !seen.insert(&r.path) {
                return bad(format!("duplicate path {}", r.path.display()));
            }
            if let (Some(e), Some(s)) = (r.event_id, r.split) {
                if let Some(prev) = event_split.insert(e, s) {
                    if prev != s {
                        return bad(format!("event {e} appears in both {prev} and {s}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.base_dir.join(&r.path)
        }
    }

    pub fn sample(&self, r: &Record) -> ImageSample {
        ImageSample {
            path: self.resolve(r),
            label: r.label,
            event_id: r.event_id,
        }
    }

    /// Samples of one split in manifest order.
    pub fn split_samples(&self, split: Split) -> Vec<ImageSample> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .map(|r| self.sample(r))
            .collect()
    }

    pub fn samples(&self) -> Vec<ImageSample> {
        self.records.iter().map(|r| self.sample(r)).collect()
    }

    /// Event ids present in a split.
    pub fn events(&self, split: Split) -> HashSet<u64> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .filter_map(|r| r.event_id)
            .collect()
    }
}
