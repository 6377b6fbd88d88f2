use std::collections::BTreeMap;

use image::RgbImage;
use serde::Serialize;

use super::kmeans::kmeans;
use super::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::freqnet::{FreqFeatures, FREQUENCIES};
use crate::tensor::Rng;

/// Largest allowed gap, in percentage points, before a ratio warning.
pub const RATIO_TOLERANCE: f64 = 5.0;
pub const COLOR_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub n_clusters: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            n_clusters: 200,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Usage(format!("split ratios must be positive: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!("split ratios sum to {sum}, not 1")));
        }
        if self.n_clusters == 0 {
            return Err(Error::Usage("cluster count must be positive".into()));
        }
        Ok(())
    }
}

/// Clustering vector for an image without an event id: the mean of each
/// frequency row followed by an 8-bin histogram per RGB channel (fractions).
pub fn event_features(image: &RgbImage, freq: &FreqFeatures) -> Vec<f64> {
    let mut v: Vec<f64> = (0..FREQUENCIES)
        .map(|r| {
            let row = freq.row(r);
            row.iter().sum::<f64>() / row.len() as f64
        })
        .collect();
    let mut hist = [0.0; 3 * COLOR_BINS];
    for px in image.pixels() {
        for c in 0..3 {
            hist[c * COLOR_BINS + usize::from(px.0[c]) * COLOR_BINS / 256] += 1.0;
        }
    }
    let n = f64::from(image.width() * image.height()).max(1.0);
    v.extend(hist.iter().map(|h| h / n));
    v
}

/// Fills missing event ids (or all of them when `overwrite`) with k-means
/// clusters of `features`, numbered after the largest existing id.
/// `features[i]` belongs to `manifest.records[i]`. Returns the number of
/// records relabelled.
pub fn assign_events(
    manifest: &mut Manifest,
    features: &[Vec<f64>],
    spec: &SplitSpec,
    overwrite: bool,
) -> Result<usize> {
    if features.len() != manifest.records.len() {
        return Err(Error::dim("one feature vector per record required"));
    }
    let targets: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| overwrite || manifest.records[i].event_id.is_none())
        .collect();
    if targets.is_empty() {
        return Ok(0);
    }
    let base = if overwrite {
        0
    } else {
        manifest.records.iter().filter_map(|r| r.event_id).max().map_or(0, |m| m + 1)
    };
    let k = spec.n_clusters.min(targets.len());
    if k < spec.n_clusters {
        log::warn!("only {} records to cluster; using {k} clusters instead of {}", targets.len(), spec.n_clusters);
    }
    let pts: Vec<Vec<f64>> = targets.iter().map(|&i| features[i].clone()).collect();
    let km = kmeans(&pts, k, &mut Rng::new(spec.seed), 100)?;
    for (&i, &c) in targets.iter().zip(&km.assignments) {
        manifest.records[i].event_id = Some(base + c as u64);
        manifest.records[i].split = None;
    }
    Ok(targets.len())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitReport {
    /// Records per split, train/val/test.
    pub counts: [usize; 3],
    pub events: [usize; 3],
    pub ratios: [f64; 3],
    pub warnings: Vec<String>,
}

/// Assigns whole events to splits: events by decreasing size (ties by id) go
/// to the split with the largest shortfall against its target count (ties
/// train, val, test). Every record must carry an event id.
pub fn event_split(manifest: &Manifest, spec: &SplitSpec) -> Result<(Manifest, SplitReport)> {
    spec.validate()?;
    let mut sizes: BTreeMap<u64, usize> = BTreeMap::new();
    for r in &manifest.records {
        let e = r
            .event_id
            .ok_or_else(|| Error::Usage(format!("{} has no event id", r.path.display())))?;
        *sizes.entry(e).or_default() += 1;
    }
    if sizes.len() < Split::ALL.len() {
        return Err(Error::Usage(format!(
            "{} event clusters cannot fill {} splits",
            sizes.len(),
            Split::ALL.len()
        )));
    }
    let total = manifest.records.len() as f64;
    let mut order: Vec<(u64, usize)> = sizes.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut counts = [0usize; 3];
    let mut events = [0usize; 3];
    let mut placement = BTreeMap::new();
    for (e, size) in order {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, &ratio) in spec.ratios.iter().enumerate() {
            let deficit = ratio * total - counts[i] as f64;
            if deficit > best_deficit {
                best = i;
                best_deficit = deficit;
            }
        }
        counts[best] += size;
        events[best] += 1;
        placement.insert(e, Split::ALL[best]);
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Some(placement[&r.event_id.expect("checked above")]);
    }
    let ratios = counts.map(|c| c as f64 / total);
    let mut warnings = Vec::new();
    for (i, s) in Split::ALL.iter().enumerate() {
        let gap = 100.0 * (ratios[i] - spec.ratios[i]).abs();
        if gap > RATIO_TOLERANCE {
            let msg = format!(
                "{s} holds {:.1}% of records against a {:.1}% target",
                100.0 * ratios[i],
                100.0 * spec.ratios[i]
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    out.validate()?;
    Ok((
        out,
        SplitReport {
            counts,
            events,
            ratios,
            warnings,
        },
    ))
}
