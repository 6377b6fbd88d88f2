//! Pixel-domain sub-network: four conv blocks, a tap after each block
//! producing `v_1..v_4`, and a bidirectional GRU over the taps giving
//! `l_1..l_4`.

mod gru;
mod preprocess;

pub use gru::{bigru_forward, gru_step, GruState};
pub use preprocess::{augment, pixel_preprocess, to_unit_tensor, PixelNorm};

use crate::error::{Error, Result};
use crate::model::{he_uniform, insert_batchnorm, ModelConfig, PixelLayout};
use crate::tensor::{ConvSpec, NodeId, ParamStore, Rng, Session, Tensor};

pub const BLOCKS: usize = 4;

/// Side of block `t`'s output (`t` counted from 1).
pub fn block_side(cfg: &ModelConfig, t: usize) -> usize {
    cfg.image_size >> t
}

fn tap_flat(cfg: &ModelConfig, t: usize) -> usize {
    let side = block_side(cfg, t);
    cfg.tap_channels * side * side
}

/// Taps that a layout actually reads, counted from 1.
pub fn used_taps(layout: &PixelLayout) -> Vec<usize> {
    if layout.branches {
        (1..=BLOCKS).collect()
    } else {
        vec![BLOCKS]
    }
}

pub fn init_params(cfg: &ModelConfig, layout: &PixelLayout, store: &mut ParamStore, rng: &mut Rng) {
    let mut cin = 3;
    for (i, &width) in cfg.pixel_widths.iter().enumerate() {
        let p = format!("pixel.block{}", i + 1);
        store.insert(format!("{p}.conv3.weight"), he_uniform(&[width, cin, 3, 3], cin * 9, rng), true);
        store.insert(format!("{p}.conv3.bias"), Tensor::zeros([width]), true);
        insert_batchnorm(store, &format!("{p}.bn3"), width);
        store.insert(format!("{p}.conv1.weight"), he_uniform(&[width, width, 1, 1], width, rng), true);
        store.insert(format!("{p}.conv1.bias"), Tensor::zeros([width]), true);
        insert_batchnorm(store, &format!("{p}.bn1"), width);
        cin = width;
    }
    for t in used_taps(layout) {
        let p = format!("pixel.tap{t}");
        let width = cfg.pixel_widths[t - 1];
        let tc = cfg.tap_channels;
        store.insert(format!("{p}.conv.weight"), he_uniform(&[tc, width, 1, 1], width, rng), true);
        store.insert(format!("{p}.conv.bias"), Tensor::zeros([tc]), true);
        let flat = tap_flat(cfg, t);
        store.insert(format!("{p}.fc.weight"), he_uniform(&[cfg.feature_dim, flat], flat, rng), true);
        store.insert(format!("{p}.fc.bias"), Tensor::zeros([cfg.feature_dim]), true);
    }
    if layout.bigru {
        for dir in ["fwd", "bwd"] {
            gru::init_direction(
                store,
                &format!("pixel.gru.{dir}"),
                cfg.feature_dim,
                cfg.gru_hidden,
                rng,
            );
        }
    }
}

fn conv_bn_relu(s: &mut Session, x: NodeId, conv: &str, bn: &str, spec: ConvSpec) -> Result<NodeId> {
    let w = s.param(&format!("{conv}.weight"))?;
    let b = s.param(&format!("{conv}.bias"))?;
    let x = s.graph.conv2d(x, w, Some(b), spec)?;
    let x = s.batchnorm(x, bn)?;
    Ok(s.graph.relu(x))
}

/// Block `t`: 3x3 conv, 1x1 conv (each with batch norm and ReLU), 2x2 max pool.
pub fn block_forward(s: &mut Session, x: NodeId, t: usize) -> Result<NodeId> {
    let p = format!("pixel.block{t}");
    let x = conv_bn_relu(s, x, &format!("{p}.conv3"), &format!("{p}.bn3"), ConvSpec::same())?;
    let x = conv_bn_relu(s, x, &format!("{p}.conv1"), &format!("{p}.bn1"), ConvSpec::valid())?;
    s.graph.maxpool2d(x, 2, 2)
}

/// Tap `t` on block `t`'s output: 1x1 conv, ReLU, flatten, FC, ReLU, dropout.
pub fn tap_forward(s: &mut Session, x: NodeId, t: usize, cfg: &ModelConfig) -> Result<NodeId> {
    let p = format!("pixel.tap{t}");
    let w = s.param(&format!("{p}.conv.weight"))?;
    let b = s.param(&format!("{p}.conv.bias"))?;
    let x = s.graph.conv2d(x, w, Some(b), ConvSpec::valid())?;
    let x = s.graph.relu(x);
    let batch = s.graph.shape(x)[0];
    let flat: usize = s.graph.shape(x)[1..].iter().product();
    let x = s.graph.reshape(x, &[batch, flat])?;
    let x = s.linear(x, &format!("{p}.fc"))?;
    let x = s.graph.relu(x);
    s.dropout(x, cfg.pixel_dropout)
}

fn check_input(s: &Session, x: NodeId, cfg: &ModelConfig) -> Result<()> {
    let shape = s.graph.shape(x);
    let n = cfg.image_size;
    if shape.len() != 4 || shape[1..] != [3, n, n] {
        return Err(Error::dim(format!("pixel input must be [batch x 3 x {n} x {n}], got {shape:?}")));
    }
    Ok(())
}

/// Branch vectors for the taps the layout uses (`v_1..v_4`, or only `v_4`),
/// each `[batch x feature_dim]`.
pub fn branch_forward(s: &mut Session, x: NodeId, cfg: &ModelConfig, layout: &PixelLayout) -> Result<Vec<NodeId>> {
    check_input(s, x, cfg)?;
    let taps = used_taps(layout);
    let mut out = Vec::with_capacity(taps.len());
    let mut h = x;
    for t in 1..=BLOCKS {
        h = block_forward(s, h, t)?;
        if taps.contains(&t) {
            out.push(tap_forward(s, h, t, cfg)?);
        }
    }
    Ok(out)
}

/// Blocks `1..=t` followed by tap `t`, with no other taps evaluated.
pub fn truncated_forward(s: &mut Session, x: NodeId, cfg: &ModelConfig, t: usize) -> Result<NodeId> {
    check_input(s, x, cfg)?;
    if !(1..=BLOCKS).contains(&t) {
        return Err(Error::Usage(format!("tap index {t} outside 1..={BLOCKS}")));
    }
    let mut h = x;
    for i in 1..=t {
        h = block_forward(s, h, i)?;
    }
    tap_forward(s, h, t, cfg)
}

/// Pixel features handed to fusion: `l_1..l_4` through the Bi-GRU, or the raw
/// branch vectors when the layout drops it.
pub fn pixel_forward(s: &mut Session, x: NodeId, cfg: &ModelConfig, layout: &PixelLayout) -> Result<Vec<NodeId>> {
    let v = branch_forward(s, x, cfg, layout)?;
    if !layout.bigru {
        return Ok(v);
    }
    if v.len() != BLOCKS {
        return Err(Error::dim(format!("Bi-GRU expects {BLOCKS} branch vectors, got {}", v.len())));
    }
    bigru_forward(s, "pixel.gru", &v, cfg.gru_hidden)
}
