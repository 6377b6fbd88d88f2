//! Corpus preparation and short training runs.

use std::path::Path;

use mvnn::data::{event_split, synth_corpus, Split, SplitSpec, SynthConfig, SynthKnobs};
use mvnn::pixelnet::PixelNorm;
use mvnn::train::{self, Adam, Checkpoint, Metrics, Needs, PreparedSet, TrainConfig};
use mvnn::{Ablation, ModelConfig, MvnnModel, Rng};

pub struct Splits {
    pub train: PreparedSet,
    pub val: PreparedSet,
    pub test: PreparedSet,
}

/// Generates a corpus under `dir`, splits it by event and decodes all three
/// splits for both sub-networks.
pub fn prepare(dir: &Path, synth: &SynthConfig, cfg: &ModelConfig) -> Splits {
    let manifest = synth_corpus(dir, synth).unwrap();
    let (manifest, _) = event_split(&manifest, &SplitSpec::default()).unwrap();
    let build = |s: Split| PreparedSet::build(&manifest.split_samples(s), cfg, Needs::ALL).unwrap();
    Splits {
        train: build(Split::Train),
        val: build(Split::Val),
        test: build(Split::Test),
    }
}

pub fn knobs(recompress: bool, striking: bool) -> SynthKnobs {
    SynthKnobs { recompress, striking }
}

pub fn train_and_test(cfg: &ModelConfig, ablation: Ablation, splits: &Splits, tc: &TrainConfig) -> (Checkpoint, Metrics) {
    let (ck, _) = train::train_model(cfg, ablation, &splits.train, &splits.val, tc, &mut |_| {}).unwrap();
    let metrics = train::evaluate(&ck.model, &splits.test).unwrap();
    (ck, metrics)
}

pub struct Determinism {
    pub checkpoints_identical: bool,
    pub metrics_identical: bool,
    pub roundtrip_identical: bool,
}

/// Trains the same variant twice and compares, then reloads a checkpoint from
/// disk and compares its inference outputs bit for bit.
pub fn determinism(cfg: &ModelConfig, splits: &Splits, tc: &TrainConfig, scratch: &Path) -> Determinism {
    let (a, ma) = train_and_test(cfg, Ablation::Full, splits, tc);
    let (b, mb) = train_and_test(cfg, Ablation::Full, splits, tc);
    let path = scratch.join("model.ckpt");
    a.save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap();
    let before = train::predict(&a.model, &splits.test).unwrap();
    let after = train::predict(&reloaded.model, &splits.test).unwrap();
    let bits = |o: &[mvnn::fusion::FusedOutput]| -> Vec<u64> {
        o.iter()
            .flat_map(|x| x.p.iter().chain(x.u.iter()).chain(x.alphas.iter().flatten()).map(|v| v.to_bits()))
            .collect()
    };
    Determinism {
        checkpoints_identical: a.to_bytes() == b.to_bytes(),
        metrics_identical: ma == mb,
        roundtrip_identical: reloaded == a && bits(&before) == bits(&after),
    }
}

/// Repeated Adam steps on one fixed batch in training mode (dropout and batch
/// statistics on). Returns the training loss after every step, stopping at
/// the first value below `target`.
pub fn overfit(cfg: &ModelConfig, data: &PreparedSet, batch: usize, steps: usize, target: f64, seed: u64) -> Vec<f64> {
    let mut model = MvnnModel::new(cfg.clone(), Ablation::Full, seed).unwrap();
    let idx: Vec<usize> = (0..batch.min(data.len())).collect();
    let subset = data.subset(&idx);
    model.pixel_norm = PixelNorm::fit(subset.pixels.as_ref().unwrap()).unwrap();
    let layout = model.layout();
    let labels: Vec<f64> = subset.labels.iter().map(|&y| f64::from(y)).collect();
    let all: Vec<usize> = (0..subset.len()).collect();
    let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (grads, stats, loss) = {
            let (mut s, nodes) = train::forward_batch(
                &model.params,
                cfg,
                &layout,
                &model.pixel_norm,
                &subset,
                &all,
                true,
                Rng::derive(seed, step as u64),
                None,
            )
            .unwrap();
            let loss = s.graph.bce_loss(nodes.p, &labels).unwrap();
            let value = s.graph.value(loss).item();
            s.graph.backward(loss).unwrap();
            (s.param_grads(), s.take_stat_updates(), value)
        };
        history.push(loss);
        if loss < target {
            break;
        }
        adam.update(&mut model.params, &grads).unwrap();
        for (prefix, st) in &stats {
            model.params.set_running_stats(prefix, st).unwrap();
        }
    }
    history
}
