use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::Checkpoint;
use super::metrics::Metrics;
use super::prepare::{Needs, PreparedSet};
use crate::data::batch_indices;
use crate::error::{Error, Result};
use crate::fusion::{mvnn_forward, ForwardNodes, FusedOutput};
use crate::model::{init_params, Ablation, Layout, ModelConfig, MvnnModel};
use crate::pixelnet::PixelNorm;
use crate::tensor::{ParamStore, Rng, Session};

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Standalone epochs for each sub-network before joint training.
    pub pretrain_epochs: usize,
    /// Flip and crop-resize during pixel pretraining.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 300,
            patience: 10,
            pretrain_epochs: 20,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2, self.eps)
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubNetwork {
    Freq,
    Pixel,
}

struct Stage {
    name: &'static str,
    layout: Layout,
    epochs: usize,
    early_stop: bool,
    augment: bool,
    stream: u64,
}

fn stream(stage: u64, epoch: usize, batch: usize) -> u64 {
    (stage << 48) | ((epoch as u64) << 24) | batch as u64
}

const SHUFFLE: usize = 0xFF_FFFF;
const AUGMENT_BIT: u64 = 1 << 63;

/// Builds the batch inputs and runs the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<'p>(
    params: &'p ParamStore,
    cfg: &ModelConfig,
    layout: &Layout,
    norm: &PixelNorm,
    data: &PreparedSet,
    idx: &[usize],
    training: bool,
    rng: Rng,
    augment: Option<&mut Rng>,
) -> Result<(Session<'p>, ForwardNodes)> {
    let mut s = Session::new(params, training, rng);
    let freq = if layout.freq {
        Some(s.input(data.freq_batch(idx)?))
    } else {
        None
    };
    let pixel = if layout.pixel.is_some() {
        Some(s.input(data.pixel_batch(idx, norm, augment)?))
    } else {
        None
    };
    let nodes = mvnn_forward(&mut s, freq, pixel, cfg, layout)?;
    Ok((s, nodes))
}

fn labels_of(data: &PreparedSet, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| f64::from(data.labels[i])).collect()
}

/// Inference over a whole set in order; returns mean loss and outputs.
fn eval_set(
    params: &ParamStore,
    cfg: &ModelConfig,
    layout: &Layout,
    norm: &PixelNorm,
    data: &PreparedSet,
) -> Result<(f64, Vec<FusedOutput>)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut outputs = Vec::with_capacity(data.len());
    for idx in all.chunks(EVAL_BATCH) {
        let (mut s, nodes) = forward_batch(params, cfg, layout, norm, data, idx, false, Rng::new(0), None)?;
        let loss = s.graph.bce_loss(nodes.p, &labels_of(data, idx))?;
        total += s.graph.value(loss).item() * idx.len() as f64;
        outputs.extend(FusedOutput::collect(&s.graph, &nodes));
    }
    Ok((total / data.len() as f64, outputs))
}

fn accuracy(data: &PreparedSet, outputs: &[FusedOutput]) -> f64 {
    let correct = outputs
        .iter()
        .zip(&data.labels)
        .filter(|(o, &y)| o.predicted_label == y)
        .count();
    correct as f64 / data.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn fit(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    norm: &PixelNorm,
    stage: &Stage,
    train: &PreparedSet,
    val: Option<&PreparedSet>,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    let needs = Needs::of(&stage.layout);
    train.check(needs)?;
    if let Some(v) = val {
        v.check(needs)?;
    }
    let mut adam = tc.adam();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut waited = 0;
    for epoch in 1..=stage.epochs {
        let start = Instant::now();
        let mut order_rng = Rng::derive(tc.seed, stream(stage.stream, epoch, SHUFFLE));
        let batches = batch_indices(train.len(), tc.batch_size, &mut order_rng)?;
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let fail = |reason: String| Error::Training {
                epoch,
                batch: b + 1,
                reason,
            };
            let key = stream(stage.stream, epoch, b);
            let mut aug_rng = Rng::derive(tc.seed, key | AUGMENT_BIT);
            let augment = stage.augment.then_some(&mut aug_rng);
            let (grads, stats, loss) = {
                let (mut s, nodes) = forward_batch(
                    params,
                    cfg,
                    &stage.layout,
                    norm,
                    train,
                    idx,
                    true,
                    Rng::derive(tc.seed, key),
                    augment,
                )
                .map_err(|e| match e {
                    Error::Numeric(r) => fail(r),
                    other => other,
                })?;
                let loss = s.graph.bce_loss(nodes.p, &labels_of(train, idx))?;
                let value = s.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(fail(format!("loss is {value}")));
                }
                s.graph.backward(loss)?;
                (s.param_grads(), s.take_stat_updates(), value)
            };
            if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(fail("non-finite gradient".into()));
            }
            adam.update(params, &grads)?;
            for (prefix, st) in &stats {
                params.set_running_stats(prefix, st)?;
            }
            loss_sum += loss * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_accuracy) = match val {
            Some(v) => {
                let (l, out) = eval_set(params, cfg, &stage.layout, norm, v)?;
                (Some(l), Some(accuracy(v, &out)))
            }
            None => (None, None),
        };
        let log = EpochLog {
            stage: stage.name.to_string(),
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: train {train_loss:.4} val {:?} acc {:?} ({:.1}s)",
            stage.name,
            val_loss,
            val_accuracy,
            log.seconds
        );
        sink(&log);
        report.history.push(log);
        report.epochs_run = epoch;
        if stage.early_stop {
            let vl = val_loss.expect("early stopping requires validation data");
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, params.clone()));
                report.best_epoch = Some(epoch);
                report.best_val_loss = Some(vl);
                waited = 0;
            } else {
                waited += 1;
                if waited >= tc.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *params = snapshot;
    }
    Ok(report)
}

/// Trains one sub-network standalone behind a temporary classifier head
/// (directly on `l0`, or attention over the pixel features), then keeps the
/// trunk and discards the head.
pub fn pretrain(
    model: &mut MvnnModel,
    sub: SubNetwork,
    train: &PreparedSet,
    val: Option<&PreparedSet>,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&EpochLog),
) -> Result<Option<TrainReport>> {
    tc.validate()?;
    if tc.pretrain_epochs == 0 {
        return Ok(None);
    }
    let full = model.layout();
    let (layout, prefix, name, stream_id, augment) = match sub {
        SubNetwork::Freq if full.freq => (Layout::freq_only(), "freq.", "freq_pretrain", 4, false),
        SubNetwork::Pixel => match full.pixel_only() {
            Some(l) => (l, "pixel.", "pixel_pretrain", 5, tc.augment),
            None => return Err(Error::Config("this variant has no pixel sub-network".into())),
        },
        SubNetwork::Freq => return Err(Error::Config("this variant has no frequency sub-network".into())),
    };
    let head = init_params(&model.config, &layout, tc.seed ^ (0x5eed << 8 | stream_id))?;
    let mut temp = ParamStore::new();
    temp.merge_prefix(&model.params, prefix);
    temp.merge_prefix(&head, "fusion.");
    let stage = Stage {
        name,
        layout,
        epochs: tc.pretrain_epochs,
        early_stop: false,
        augment,
        stream: stream_id,
    };
    let report = fit(&mut temp, &model.config, &model.pixel_norm, &stage, train, val, tc, sink)?;
    model.params.merge_prefix(&temp, prefix);
    Ok(Some(report))
}

/// Joint training of every component with early stopping on validation loss;
/// the best-validation parameters are restored at the end.
pub fn train_joint(
    model: &mut MvnnModel,
    train: &PreparedSet,
    val: &PreparedSet,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    tc.validate()?;
    if val.is_empty() {
        return Err(Error::Config("joint training needs a non-empty validation split".into()));
    }
    if train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let stage = Stage {
        name: "joint",
        layout: model.layout(),
        epochs: tc.max_epochs,
        early_stop: true,
        augment: false,
        stream: 3,
    };
    let norm = model.pixel_norm;
    fit(&mut model.params, &model.config, &norm, &stage, train, Some(val), tc, sink)
}

/// Fresh model, pixel statistics from the training split, pretraining of each
/// present sub-network, then joint training.
pub fn train_model(
    config: &ModelConfig,
    ablation: Ablation,
    train: &PreparedSet,
    val: &PreparedSet,
    tc: &TrainConfig,
    sink: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, TrainReport)> {
    tc.validate()?;
    let mut model = MvnnModel::new(config.clone(), ablation, tc.seed)?;
    let layout = model.layout();
    train.check(Needs::of(&layout))?;
    if layout.pixel.is_some() {
        model.pixel_norm = PixelNorm::fit(train.pixels.as_ref().expect("checked"))?;
    }
    if layout.freq {
        pretrain(&mut model, SubNetwork::Freq, train, Some(val), tc, sink)?;
    }
    if layout.pixel.is_some() {
        pretrain(&mut model, SubNetwork::Pixel, train, Some(val), tc, sink)?;
    }
    let report = train_joint(&mut model, train, val, tc, sink)?;
    Ok((
        Checkpoint {
            model,
            train: Some(tc.clone()),
        },
        report,
    ))
}

/// Inference-mode outputs for every sample, in order.
pub fn predict(model: &MvnnModel, data: &PreparedSet) -> Result<Vec<FusedOutput>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let layout = model.layout();
    data.check(Needs::of(&layout))?;
    Ok(eval_set(&model.params, &model.config, &layout, &model.pixel_norm, data)?.1)
}

pub fn evaluate(model: &MvnnModel, data: &PreparedSet) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let outputs = predict(model, data)?;
    let predicted: Vec<u8> = outputs.iter().map(|o| o.predicted_label).collect();
    Ok(Metrics::from_predictions(&data.labels, &predicted))
}

/// Mean inference-mode loss over a set.
pub fn mean_loss(model: &MvnnModel, data: &PreparedSet) -> Result<f64> {
    let layout = model.layout();
    data.check(Needs::of(&layout))?;
    Ok(eval_set(&model.params, &model.config, &layout, &model.pixel_norm, data)?.0)
}
