//! Manifests, event-disjoint splitting, batching, and the synthetic corpus.

mod batches;
mod kmeans;
mod manifest;
mod split;
mod synth;

pub use batches::{batch_indices, load_batches};
pub use kmeans::{kmeans, KMeans};
pub use manifest::{load_rgb, load_with_luma, ImageSample, Manifest, Record, Split};
pub use split::{assign_events, event_features, event_split, SplitReport, SplitSpec, COLOR_BINS, RATIO_TOLERANCE};
pub use synth::{
    boost_chroma, decode_jpeg, encode_jpeg, synth_corpus, Manipulation, SynthConfig, SynthKnobs, REAL_QUALITY,
    SCENES_PER_EVENT,
};
