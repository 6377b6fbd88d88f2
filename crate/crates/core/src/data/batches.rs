use super::manifest::{ImageSample, Manifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    if n == 0 {
        return Err(Error::Usage("cannot batch an empty split".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One epoch of shuffled batches over a split.
pub fn load_batches(manifest: &Manifest, split: Split, batch_size: usize, seed: u64) -> Result<Vec<Vec<ImageSample>>> {
    let samples = manifest.split_samples(split);
    if samples.is_empty() {
        return Err(Error::Usage(format!("split `{split}` is empty")));
    }
    let batches = batch_indices(samples.len(), batch_size, &mut Rng::new(seed))?;
    Ok(batches
        .into_iter()
        .map(|b| b.into_iter().map(|i| samples[i].clone()).collect())
        .collect())
}
