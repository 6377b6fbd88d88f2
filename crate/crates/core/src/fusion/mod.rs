//! Attention fusion of the feature vectors `l_0..l_4`, the two-class
//! classifier, and the end-to-end forward pass.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::freqnet;
use crate::model::{glorot_uniform, FusionMode, Layout, ModelConfig};
use crate::pixelnet;
use crate::tensor::{Graph, NodeId, ParamStore, Rng, Session, Tensor};

pub fn init_params(cfg: &ModelConfig, layout: &Layout, store: &mut ParamStore, rng: &mut Rng) {
    let d = cfg.feature_dim;
    let da = cfg.attention_dim;
    if layout.fusion == FusionMode::Attention {
        store.insert("fusion.attn.w_f", glorot_uniform(&[da, d], d, da, rng), true);
        store.insert("fusion.attn.b_f", Tensor::zeros([da]), true);
        store.insert("fusion.attn.v", glorot_uniform(&[da], da, 1, rng), true);
    }
    let cls_in = match layout.fusion {
        FusionMode::Concat => d * layout.feature_count(),
        _ => d,
    };
    store.insert("fusion.cls.weight", glorot_uniform(&[2, cls_in], cls_in, 2, rng), true);
    store.insert("fusion.cls.bias", Tensor::zeros([2]), true);
}

/// Attention scores `F(l_i) = v^T tanh(W_f l_i + b_f)`, softmax-normalized
/// across the features, and `u = sum_i alpha_i l_i`.
/// Returns `(alphas [batch x n], u [batch x d])`.
pub fn attend(s: &mut Session, features: &[NodeId]) -> Result<(NodeId, NodeId)> {
    let first = *features.first().ok_or_else(|| Error::dim("attention over zero features"))?;
    let base = s.graph.shape(first).to_vec();
    if base.len() != 2 || features.iter().any(|&f| s.graph.shape(f) != base.as_slice()) {
        return Err(Error::dim("attention features must share one [batch x d] shape"));
    }
    let w = s.param("fusion.attn.w_f")?;
    let b = s.param("fusion.attn.b_f")?;
    let v = s.param("fusion.attn.v")?;
    let da = s.graph.shape(v)[0];
    let v = s.graph.reshape(v, &[da, 1])?;
    let mut scores = Vec::with_capacity(features.len());
    for &l in features {
        let h = s.graph.linear(l, w, Some(b))?;
        let h = s.graph.tanh(h);
        scores.push(s.graph.matmul(h, v)?);
    }
    let scores = s.graph.concat(&scores, 1)?;
    let alphas = s.graph.softmax(scores)?;
    let mut u = None;
    for (i, &l) in features.iter().enumerate() {
        let a = s.graph.slice(alphas, 1, i, i + 1)?;
        let term = s.graph.row_scale(l, a)?;
        u = Some(match u {
            None => term,
            Some(acc) => s.graph.add(acc, term)?,
        });
    }
    Ok((alphas, u.expect("at least one feature")))
}

/// `p = softmax(W_c u + b_c)`, `[batch x 2]` with column 1 the fake class.
pub fn classify(s: &mut Session, u: NodeId) -> Result<NodeId> {
    let logits = s.linear(u, "fusion.cls")?;
    s.graph.softmax(logits)
}

/// Output nodes of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `l_0` first when present, then the pixel features.
    pub features: Vec<NodeId>,
    pub alphas: Option<NodeId>,
    pub u: NodeId,
    pub p: NodeId,
}

/// Runs the sub-networks a layout keeps and fuses their features.
/// `freq` is `[batch x 64 x 250]`, `pixel` is `[batch x 3 x s x s]`.
pub fn mvnn_forward(
    s: &mut Session,
    freq: Option<NodeId>,
    pixel: Option<NodeId>,
    cfg: &ModelConfig,
    layout: &Layout,
) -> Result<ForwardNodes> {
    layout.validate()?;
    let mut features = Vec::with_capacity(layout.feature_count());
    if layout.freq {
        let x = freq.ok_or_else(|| Error::Config("layout needs frequency input".into()))?;
        features.push(freqnet::freqnet_forward(s, x, cfg)?);
    }
    if let Some(p) = &layout.pixel {
        let x = pixel.ok_or_else(|| Error::Config("layout needs pixel input".into()))?;
        features.extend(pixelnet::pixel_forward(s, x, cfg, p)?);
    }
    let (alphas, u) = match layout.fusion {
        FusionMode::Attention => {
            let (a, u) = attend(s, &features)?;
            (Some(a), u)
        }
        FusionMode::Concat => (None, s.graph.concat(&features, 1)?),
        FusionMode::Direct => (None, features[0]),
    };
    let p = classify(s, u)?;
    Ok(ForwardNodes {
        features,
        alphas,
        u,
        p,
    })
}

/// `1` (fake) when `p_fake >= p_real`; an exact tie counts as fake.
pub fn predicted_label(p_real: f64, p_fake: f64) -> u8 {
    u8::from(p_fake >= p_real)
}

/// Per-sample values of a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusedOutput {
    pub alphas: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub p: [f64; 2],
    pub predicted_label: u8,
}

impl FusedOutput {
    pub fn collect(graph: &Graph, nodes: &ForwardNodes) -> Vec<FusedOutput> {
        let p = graph.value(nodes.p);
        let u = graph.value(nodes.u);
        let d = u.shape()[1];
        let alphas = nodes.alphas.map(|a| graph.value(a));
        (0..p.shape()[0])
            .map(|i| {
                let (pr, pf) = (p.data()[2 * i], p.data()[2 * i + 1]);
                FusedOutput {
                    alphas: alphas.map(|a| {
                        let n = a.shape()[1];
                        a.data()[i * n..(i + 1) * n].to_vec()
                    }),
                    u: u.data()[i * d..(i + 1) * d].to_vec(),
                    p: [pr, pf],
                    predicted_label: predicted_label(pr, pf),
                }
            })
            .collect()
    }
}
