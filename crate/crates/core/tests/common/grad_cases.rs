//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance runner.

use mvnn::fusion;
use mvnn::pixelnet;
use mvnn::tensor::{ConvSpec, ParamStore, Session};
use mvnn::{freqnet, Ablation, ModelConfig, MvnnModel, NodeId, Rng, Tensor};

use super::{fd_check, jitter, random_tensor, weighted_sum, FdReport};

pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

fn store_of(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    for (name, shape) in entries {
        store.insert(*name, random_tensor(shape, &mut rng), true);
    }
    store
}

fn p(s: &mut Session, name: &str) -> NodeId {
    s.param(name).unwrap()
}

pub fn conv1d_same_and_strided() -> FdReport {
    let store = store_of(&[("x", &[2, 3, 11]), ("k", &[4, 3, 3]), ("b", &[4])], 1);
    let mut report = FdReport::default();
    for spec in [ConvSpec::same(), ConvSpec::valid().with_stride(2), ConvSpec::same().with_stride(3)] {
        let f = move |s: &mut Session| {
            let (x, k, b) = (p(s, "x"), p(s, "k"), p(s, "b"));
            let y = s.graph.conv1d(x, k, Some(b), spec).unwrap();
            weighted_sum(s, y, 5)
        };
        report.absorb(fd_check(&store, &f));
    }
    report
}

pub fn conv2d_same_and_strided() -> FdReport {
    let store = store_of(&[("x", &[2, 2, 7, 6]), ("k", &[3, 2, 3, 3]), ("b", &[3])], 2);
    let mut report = FdReport::default();
    for spec in [ConvSpec::same(), ConvSpec::valid().with_stride(2)] {
        let f = move |s: &mut Session| {
            let (x, k, b) = (p(s, "x"), p(s, "k"), p(s, "b"));
            let y = s.graph.conv2d(x, k, Some(b), spec).unwrap();
            weighted_sum(s, y, 6)
        };
        report.absorb(fd_check(&store, &f));
    }
    report
}

pub fn fully_connected() -> FdReport {
    let store = store_of(&[("x", &[3, 5]), ("fc.weight", &[4, 5]), ("fc.bias", &[4])], 3);
    let f = |s: &mut Session| {
        let x = p(s, "x");
        let y = s.linear(x, "fc").unwrap();
        weighted_sum(s, y, 7)
    };
    fd_check(&store, &f)
}

pub fn matmul_operands() -> FdReport {
    let store = store_of(&[("a", &[3, 4]), ("b", &[4, 2])], 4);
    let f = |s: &mut Session| {
        let (a, b) = (p(s, "a"), p(s, "b"));
        let y = s.graph.matmul(a, b).unwrap();
        weighted_sum(s, y, 8)
    };
    fd_check(&store, &f)
}

pub fn batchnorm_training_mode() -> FdReport {
    let mut store = store_of(&[("x", &[4, 3, 5]), ("bn.gamma", &[3]), ("bn.beta", &[3])], 5);
    store.insert("bn.running_mean", Tensor::zeros([3]), false);
    store.insert("bn.running_var", Tensor::full([3], 1.0), false);
    let f = |s: &mut Session| {
        let x = p(s, "x");
        let y = s.batchnorm(x, "bn").unwrap();
        weighted_sum(s, y, 9)
    };
    fd_check(&store, &f)
}

pub fn pooling_and_pointwise() -> FdReport {
    let store = store_of(&[("x", &[2, 3, 8, 8])], 6);
    let f = |s: &mut Session| {
        let x = p(s, "x");
        let a = s.graph.maxpool2d(x, 2, 2).unwrap();
        let a = s.graph.relu(a);
        let b = s.graph.maxpool1d(x, 3, 2).unwrap();
        let b = s.graph.sigmoid(b);
        let c = s.graph.tanh(x);
        let c = s.graph.affine(c, 1.5, -0.2);
        let la = weighted_sum(s, a, 1);
        let lb = weighted_sum(s, b, 2);
        let lc = weighted_sum(s, c, 3);
        let l = s.graph.add(la, lb).unwrap();
        s.graph.add(l, lc).unwrap()
    };
    fd_check(&store, &f)
}

pub fn softmax_concat_slice_and_row_scale() -> FdReport {
    let store = store_of(&[("x", &[3, 4]), ("y", &[3, 2]), ("k", &[3, 1])], 7);
    let f = |s: &mut Session| {
        let (x, y, k) = (p(s, "x"), p(s, "y"), p(s, "k"));
        let c = s.graph.concat(&[x, y], 1).unwrap();
        let sm = s.graph.softmax(c).unwrap();
        let part = s.graph.slice(sm, 1, 1, 4).unwrap();
        let scaled = s.graph.row_scale(part, k).unwrap();
        let r = s.graph.reshape(scaled, &[9]).unwrap();
        weighted_sum(s, r, 4)
    };
    fd_check(&store, &f)
}

pub fn binary_cross_entropy() -> FdReport {
    let store = store_of(&[("logits", &[4, 2])], 8);
    let f = |s: &mut Session| {
        let l = p(s, "logits");
        let probs = s.graph.softmax(l).unwrap();
        s.graph.bce_loss(probs, &[0.0, 1.0, 1.0, 0.0]).unwrap()
    };
    fd_check(&store, &f)
}

fn gru_store(input: usize, hidden: usize, seed: u64, dirs: &[&str]) -> ParamStore {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    for dir in dirs {
        for g in ["r", "z", "h"] {
            store.insert(format!("{dir}.w_{g}"), random_tensor(&[hidden, input + hidden], &mut rng), true);
            store.insert(format!("{dir}.b_{g}"), random_tensor(&[hidden], &mut rng), true);
        }
    }
    store
}

pub fn gru_cell() -> FdReport {
    let mut store = gru_store(3, 2, 9, &["g"]);
    let mut rng = Rng::new(10);
    store.insert("v", random_tensor(&[2, 3], &mut rng), true);
    store.insert("h", random_tensor(&[2, 2], &mut rng), true);
    let f = |s: &mut Session| {
        let (v, h) = (p(s, "v"), p(s, "h"));
        let st = pixelnet::gru_step(s, "g", v, h).unwrap();
        weighted_sum(s, st.h, 11)
    };
    fd_check(&store, &f)
}

pub fn bidirectional_gru() -> FdReport {
    let mut store = gru_store(3, 2, 12, &["g.fwd", "g.bwd"]);
    let mut rng = Rng::new(13);
    for t in 0..4 {
        store.insert(format!("v{t}"), random_tensor(&[2, 3], &mut rng), true);
    }
    let f = |s: &mut Session| {
        let seq: Vec<NodeId> = (0..4).map(|t| p(s, &format!("v{t}"))).collect();
        let out = pixelnet::bigru_forward(s, "g", &seq, 2).unwrap();
        let all = s.graph.concat(&out, 1).unwrap();
        weighted_sum(s, all, 14)
    };
    fd_check(&store, &f)
}

pub fn attention_fusion() -> FdReport {
    let store = store_of(
        &[
            ("fusion.attn.w_f", &[3, 4]),
            ("fusion.attn.b_f", &[3]),
            ("fusion.attn.v", &[3]),
            ("l0", &[2, 4]),
            ("l1", &[2, 4]),
            ("l2", &[2, 4]),
        ],
        15,
    );
    let f = |s: &mut Session| {
        let feats: Vec<NodeId> = (0..3).map(|i| p(s, &format!("l{i}"))).collect();
        let (alphas, u) = fusion::attend(s, &feats).unwrap();
        let la = weighted_sum(s, alphas, 16);
        let lu = weighted_sum(s, u, 17);
        s.graph.add(la, lu).unwrap()
    };
    fd_check(&store, &f)
}

pub fn classifier_head() -> FdReport {
    let store = store_of(&[("fusion.cls.weight", &[2, 4]), ("fusion.cls.bias", &[2]), ("u", &[3, 4])], 18);
    let f = |s: &mut Session| {
        let u = p(s, "u");
        let probs = fusion::classify(s, u).unwrap();
        s.graph.bce_loss(probs, &[1.0, 0.0, 1.0]).unwrap()
    };
    fd_check(&store, &f)
}

fn tiny_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let freq = Tensor::uniform([batch, freqnet::FREQUENCIES, freqnet::FEATURE_LEN], 0.0, 1.0, &mut rng);
    let pixel = random_tensor(&[batch, 3, cfg.image_size, cfg.image_size], &mut rng);
    (freq, pixel)
}

pub fn frequency_subnetwork() -> FdReport {
    let cfg = ModelConfig::tiny();
    let mut model = MvnnModel::new(cfg.clone(), Ablation::NoPixel, 19).unwrap();
    jitter(&mut model.params, 0.1, 19);
    let (freq, _) = tiny_inputs(&cfg, 2, 20);
    let f = |s: &mut Session| {
        let x = s.input(freq.clone());
        let l0 = freqnet::freqnet_forward(s, x, &cfg).unwrap();
        weighted_sum(s, l0, 21)
    };
    fd_check(&model.params, &f)
}

pub fn pixel_subnetwork() -> FdReport {
    let cfg = ModelConfig::tiny();
    let mut model = MvnnModel::new(cfg.clone(), Ablation::NoFreq, 22).unwrap();
    jitter(&mut model.params, 0.1, 22);
    let layout = Ablation::NoFreq.layout().pixel.unwrap();
    let (_, pixel) = tiny_inputs(&cfg, 2, 23);
    let f = |s: &mut Session| {
        let x = s.input(pixel.clone());
        let feats = pixelnet::pixel_forward(s, x, &cfg, &layout).unwrap();
        let all = s.graph.concat(&feats, 1).unwrap();
        weighted_sum(s, all, 24)
    };
    let store: ParamStore = {
        let mut st = ParamStore::new();
        st.merge_prefix(&model.params, "pixel.");
        st
    };
    fd_check(&store, &f)
}

/// Whole-network check of one variant on a two-sample batch.
pub fn full_model(ablation: Ablation) -> FdReport {
    let cfg = ModelConfig::tiny();
    let mut model = MvnnModel::new(cfg.clone(), ablation, 25).unwrap();
    jitter(&mut model.params, 0.1, 25);
    let layout = ablation.layout();
    let (freq, pixel) = tiny_inputs(&cfg, 2, 26);
    let f = |s: &mut Session| {
        let fx = layout.freq.then(|| s.input(freq.clone()));
        let px = layout.pixel.is_some().then(|| s.input(pixel.clone()));
        let nodes = fusion::mvnn_forward(s, fx, px, &cfg, &layout).unwrap();
        s.graph.bce_loss(nodes.p, &[0.0, 1.0]).unwrap()
    };
    fd_check(&model.params, &f)
}

/// Every per-layer case by name.
pub fn layer_cases() -> Vec<(&'static str, fn() -> FdReport)> {
    vec![
        ("conv1d", conv1d_same_and_strided),
        ("conv2d", conv2d_same_and_strided),
        ("fully connected", fully_connected),
        ("matmul", matmul_operands),
        ("batchnorm", batchnorm_training_mode),
        ("pooling and pointwise", pooling_and_pointwise),
        ("softmax, concat, slice, row scale", softmax_concat_slice_and_row_scale),
        ("cross-entropy", binary_cross_entropy),
        ("gru cell", gru_cell),
        ("bi-gru", bidirectional_gru),
        ("attention", attention_fusion),
        ("classifier", classifier_head),
        ("frequency sub-network", frequency_subnetwork),
        ("pixel sub-network", pixel_subnetwork),
    ]
}
