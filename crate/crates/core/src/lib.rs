//! Multi-domain visual network (MVNN) for fake-news image classification.
//!
//! The crate is organised the same way the network is:
//!
//! * [`tensor`] - a small reverse-mode autodiff engine over `f64` tensors,
//! * [`freqnet`] - block-DCT coefficient histograms and the shared 1-D CNN that
//!   encodes them into the physical-level feature `l0`,
//! * [`pixelnet`] - the four-branch CNN and the bidirectional GRU producing the
//!   semantic-level features `l1..l4`,
//! * [`fusion`] - attention over `l0..l4`, the two-way classifier and the loss,
//! * [`data`] - manifests, event-disjoint splitting and the synthetic corpus,
//! * [`train`] - pretraining, joint training, metrics, checkpoints and ablations.

pub mod data;
pub mod error;
pub mod freqnet;
pub mod fusion;
pub mod model;
pub mod pixelnet;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use model::{Ablation, ModelConfig, MvnnModel};
pub use tensor::{Graph, NodeId, Rng, Tensor};
