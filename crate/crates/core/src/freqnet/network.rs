use super::features::{FreqFeatures, FEATURE_LEN, FREQUENCIES};
use crate::error::{Error, Result};
use crate::model::{he_uniform, insert_batchnorm, ModelConfig};
use crate::tensor::{ConvSpec, NodeId, ParamStore, Rng, Session, Tensor};

/// Positions left after the three conv/pool blocks.
pub fn conv_output_len(cfg: &ModelConfig) -> usize {
    let mut len = FEATURE_LEN;
    for _ in 0..cfg.freq_filters.len() {
        if len < cfg.freq_pool {
            return 0;
        }
        len = (len - cfg.freq_pool) / cfg.freq_pool + 1;
    }
    len
}

pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) {
    let mut cin = 1;
    for (i, &filters) in cfg.freq_filters.iter().enumerate() {
        let fan_in = cin * cfg.freq_kernel;
        store.insert(
            format!("freq.conv{}.weight", i + 1),
            he_uniform(&[filters, cin, cfg.freq_kernel], fan_in, rng),
            true,
        );
        store.insert(format!("freq.conv{}.bias", i + 1), Tensor::zeros([filters]), true);
        insert_batchnorm(store, &format!("freq.bn{}", i + 1), filters);
        cin = filters;
    }
    let flat = cin * conv_output_len(cfg);
    store.insert("freq.fc_row.weight", he_uniform(&[cfg.freq_row_dim, flat], flat, rng), true);
    store.insert("freq.fc_row.bias", Tensor::zeros([cfg.freq_row_dim]), true);
    let concat = FREQUENCIES * cfg.freq_row_dim;
    store.insert("freq.fc_out.weight", he_uniform(&[cfg.feature_dim, concat], concat, rng), true);
    store.insert("freq.fc_out.bias", Tensor::zeros([cfg.feature_dim]), true);
}

/// Stacks feature matrices into a `[batch x 64 x 250]` tensor.
pub fn features_tensor(batch: &[&FreqFeatures]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Usage("empty feature batch".into()));
    }
    let mut data = Vec::with_capacity(batch.len() * FREQUENCIES * FEATURE_LEN);
    for f in batch {
        data.extend_from_slice(f.as_slice());
    }
    Tensor::new([batch.len(), FREQUENCIES, FEATURE_LEN], data)
}

/// Shared CNN applied to every frequency row: `[batch x 64 x 250]` in,
/// `[batch * 64 x row_dim]` out (the per-frequency vectors `w_i`).
pub fn row_encodings(s: &mut Session, feats: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let shape = s.graph.shape(feats).to_vec();
    if shape.len() != 3 || shape[1] != FREQUENCIES || shape[2] != FEATURE_LEN {
        return Err(Error::dim(format!(
            "frequency input must be [batch x {FREQUENCIES} x {FEATURE_LEN}], got {shape:?}"
        )));
    }
    let rows = shape[0] * FREQUENCIES;
    let mut x = s.graph.reshape(feats, &[rows, 1, FEATURE_LEN])?;
    for i in 1..=cfg.freq_filters.len() {
        let w = s.param(&format!("freq.conv{i}.weight"))?;
        let b = s.param(&format!("freq.conv{i}.bias"))?;
        x = s.graph.conv1d(x, w, Some(b), ConvSpec::same())?;
        x = s.batchnorm(x, &format!("freq.bn{i}"))?;
        x = s.graph.relu(x);
        x = s.graph.maxpool1d(x, cfg.freq_pool, cfg.freq_pool)?;
    }
    let flat: usize = s.graph.shape(x)[1..].iter().product();
    let x = s.graph.reshape(x, &[rows, flat])?;
    let x = s.linear(x, "freq.fc_row")?;
    Ok(s.graph.relu(x))
}

/// Physical-level feature `l0`: the 64 row encodings concatenated and mapped
/// through the output FC and dropout. Returns `[batch x feature_dim]`.
pub fn freqnet_forward(s: &mut Session, feats: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let batch = s.graph.shape(feats)[0];
    let w = row_encodings(s, feats, cfg)?;
    let x = s.graph.reshape(w, &[batch, FREQUENCIES * cfg.freq_row_dim])?;
    let x = s.linear(x, "freq.fc_out")?;
    let x = s.graph.relu(x);
    s.dropout(x, cfg.freq_dropout)
}
