//! Library results against the reference implementations, each case
//! returning its largest deviation for one random draw.

use mvnn::freqnet::{self, RowMatrix, ZIGZAG};
use mvnn::fusion;
use mvnn::pixelnet;
use mvnn::tensor::{ConvSpec, Padding, ParamStore, Session};
use mvnn::{Graph, NodeId, Rng, Tensor};

use super::{max_abs_diff, random_tensor, ScalarGru};

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn matmul(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (m, k, n) = (dims(&mut rng, 1, 9), dims(&mut rng, 1, 40), dims(&mut rng, 1, 9));
    let a = random_tensor(&[m, k], &mut rng);
    let b = random_tensor(&[k, n], &mut rng);
    let mut g = Graph::new();
    let (ia, ib) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(ia, ib).unwrap();
    max_abs_diff(g.value(c).data(), &super::matmul(a.data(), b.data(), m, k, n))
}

fn pick_spec(rng: &mut Rng) -> ConvSpec {
    let spec = if rng.below(2) == 0 { ConvSpec::same() } else { ConvSpec::valid() };
    spec.with_stride(dims(rng, 1, 3))
}

pub fn conv1d(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (cin, len, cout, k) = (dims(&mut rng, 1, 4), dims(&mut rng, 5, 50), dims(&mut rng, 1, 8), dims(&mut rng, 1, 5));
    let spec = pick_spec(&mut rng);
    let x = random_tensor(&[cin, len], &mut rng);
    let w = random_tensor(&[cout, cin, k], &mut rng);
    let mut g = Graph::new();
    let (ix, iw) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv1d(ix, iw, None, spec).unwrap();
    let (pad, out_len) = match spec.padding {
        Padding::Same => super::same_pad(len, k, spec.stride),
        Padding::Valid => (0, (len - k) / spec.stride + 1),
    };
    let want = super::conv1d(x.data(), cin, len, w.data(), cout, k, spec.stride, pad, out_len);
    max_abs_diff(g.value(y).data(), &want)
}

/// The 4x50 input, 8 width-3 kernels case.
pub fn conv1d_fixed(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = random_tensor(&[4, 50], &mut rng);
    let w = random_tensor(&[8, 4, 3], &mut rng);
    let mut g = Graph::new();
    let (ix, iw) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv1d(ix, iw, None, ConvSpec::valid()).unwrap();
    max_abs_diff(g.value(y).data(), &super::conv1d(x.data(), 4, 50, w.data(), 8, 3, 1, 0, 48))
}

pub fn conv2d(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (cin, h, w, cout) = (dims(&mut rng, 1, 3), dims(&mut rng, 4, 16), dims(&mut rng, 4, 16), dims(&mut rng, 1, 4));
    let (kh, kw) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
    let spec = pick_spec(&mut rng);
    let x = random_tensor(&[cin, h, w], &mut rng);
    let k = random_tensor(&[cout, cin, kh, kw], &mut rng);
    let mut g = Graph::new();
    let (ix, ik) = (g.input(x.clone()), g.input(k.clone()));
    let y = g.conv2d(ix, ik, None, spec).unwrap();
    let ((pt, oh), (pl, ow)) = match spec.padding {
        Padding::Same => (super::same_pad(h, kh, spec.stride), super::same_pad(w, kw, spec.stride)),
        Padding::Valid => ((0, (h - kh) / spec.stride + 1), (0, (w - kw) / spec.stride + 1)),
    };
    let want = super::conv2d(x.data(), (cin, h, w), k.data(), (cout, kh, kw), spec.stride, (pt, pl), (oh, ow));
    max_abs_diff(g.value(y).data(), &want)
}

/// The 3x16x16 input, four 3x3 kernels case.
pub fn conv2d_fixed(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = random_tensor(&[3, 16, 16], &mut rng);
    let k = random_tensor(&[4, 3, 3, 3], &mut rng);
    let mut g = Graph::new();
    let (ix, ik) = (g.input(x.clone()), g.input(k.clone()));
    let y = g.conv2d(ix, ik, None, ConvSpec::same()).unwrap();
    let want = super::conv2d(x.data(), (3, 16, 16), k.data(), (4, 3, 3), 1, (1, 1), (16, 16));
    max_abs_diff(g.value(y).data(), &want)
}

/// Pooled values and the gradient routing of 1-D max pooling; returns the
/// number of mismatches. Inputs are drawn from a few levels so ties occur.
pub fn maxpool1d(seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let len = dims(&mut rng, 4, 40);
    let window = dims(&mut rng, 1, 4);
    let stride = dims(&mut rng, 1, 3);
    let x: Vec<f64> = (0..len).map(|_| rng.below(4) as f64).collect();
    let (want, argmax) = super::maxpool1d(&x, window, stride);
    let mut g = Graph::new();
    let ix = g.param(Tensor::new([len], x).unwrap());
    let y = g.maxpool1d(ix, window, stride).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let mut routed = vec![0.0; len];
    for i in argmax {
        routed[i] += 1.0;
    }
    let value_miss = g.value(y).data().iter().zip(&want).filter(|(a, b)| a != b).count();
    let grad_miss = g.grad(ix).unwrap().iter().zip(&routed).filter(|(a, b)| a != b).count();
    value_miss + grad_miss
}

pub fn block_dct(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (bw, bh) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    let (w, h) = (bw * 8, bh * 8);
    let plane: Vec<f64> = (0..w * h).map(|_| rng.uniform_range(-128.0, 127.0)).collect();
    let grid = freqnet::block_dct_plane(&plane, w, h).unwrap();
    let mut worst: f64 = 0.0;
    for by in 0..bh {
        for bx in 0..bw {
            let block: Vec<f64> = (0..64)
                .map(|i| plane[(by * 8 + i / 8) * w + bx * 8 + i % 8])
                .collect();
            let want = super::dct_definition(&block);
            worst = worst.max(max_abs_diff(&grid.blocks[by * bw + bx], &want));
        }
    }
    worst
}

/// Largest deviation relative to the row's peak magnitude.
pub fn fourier_enhance(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut hist = RowMatrix::zeros(4, freqnet::RAW_BINS);
    for v in hist.data.iter_mut() {
        *v = rng.below(50) as f64;
    }
    let got = freqnet::fourier_enhance(&hist);
    (0..hist.rows)
        .map(|r| max_abs_diff(got.row(r), &super::dft_magnitude(hist.row(r))))
        .fold(0.0, f64::max)
}

/// Number of histogram cells that differ from brute-force counting.
pub fn histogram(seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let n = dims(&mut rng, 1, 30);
    let blocks: Vec<[f64; 64]> = (0..n)
        .map(|_| {
            let mut b = [0.0; 64];
            for v in b.iter_mut() {
                // a few values beyond the clamped range, and many at x.5
                *v = match rng.below(4) {
                    0 => rng.uniform_range(-400.0, 400.0),
                    1 => rng.int_between(-20, 20) as f64 + 0.5,
                    _ => rng.uniform_range(-30.0, 30.0),
                };
            }
            b
        })
        .collect();
    let grid = freqnet::DctBlockGrid {
        blocks: blocks.clone(),
        blocks_wide: n,
        blocks_high: 1,
    };
    let got = freqnet::coefficient_histograms(&grid).unwrap();
    let want = super::histogram_by_counting(&blocks, &ZIGZAG);
    got.data.iter().zip(&want).filter(|(a, b)| a != b).count()
}

fn gru_store(input: usize, hidden: usize, rng: &mut Rng, dirs: &[&str]) -> ParamStore {
    let mut store = ParamStore::new();
    for dir in dirs {
        for g in ["r", "z", "h"] {
            store.insert(format!("{dir}.w_{g}"), random_tensor(&[hidden, input + hidden], rng), true);
            store.insert(format!("{dir}.b_{g}"), random_tensor(&[hidden], rng), true);
        }
    }
    store
}

/// Returns the largest deviation over r, z, h~ and h for a random batch.
pub fn gru_step(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (input, hidden, batch) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
    let store = gru_store(input, hidden, &mut rng, &["g"]);
    let v = random_tensor(&[batch, input], &mut rng);
    let h = random_tensor(&[batch, hidden], &mut rng);
    let mut s = Session::new(&store, false, Rng::new(0));
    let (iv, ih) = (s.input(v.clone()), s.input(h.clone()));
    let st = pixelnet::gru_step(&mut s, "g", iv, ih).unwrap();
    let oracle = ScalarGru::from_store(&store, "g", input, hidden);
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let (r, z, ht, out) = oracle.step(&v.data()[b * input..(b + 1) * input], &h.data()[b * hidden..(b + 1) * hidden]);
        for (node, want) in [(st.r, r), (st.z, z), (st.h_tilde, ht), (st.h, out)] {
            let got = &s.graph.value(node).data()[b * hidden..(b + 1) * hidden];
            worst = worst.max(max_abs_diff(got, &want));
        }
    }
    worst
}

pub fn bigru(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (input, hidden, batch, steps) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 5), dims(&mut rng, 1, 3), dims(&mut rng, 1, 5));
    let store = gru_store(input, hidden, &mut rng, &["g.fwd", "g.bwd"]);
    let seq: Vec<Tensor> = (0..steps).map(|_| random_tensor(&[batch, input], &mut rng)).collect();
    let mut s = Session::new(&store, false, Rng::new(0));
    let nodes: Vec<NodeId> = seq.iter().map(|t| s.input(t.clone())).collect();
    let out = pixelnet::bigru_forward(&mut s, "g", &nodes, hidden).unwrap();
    let fwd = ScalarGru::from_store(&store, "g.fwd", input, hidden);
    let bwd = ScalarGru::from_store(&store, "g.bwd", input, hidden);
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let sample: Vec<Vec<f64>> = seq.iter().map(|t| t.data()[b * input..(b + 1) * input].to_vec()).collect();
        let want = super::scalar_bigru(&fwd, &bwd, &sample);
        for (t, node) in out.iter().enumerate() {
            let got = &s.graph.value(*node).data()[b * 2 * hidden..(b + 1) * 2 * hidden];
            worst = worst.max(max_abs_diff(got, &want[t]));
        }
    }
    worst
}

fn attention_store(d: usize, da: usize, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    store.insert("fusion.attn.w_f", random_tensor(&[da, d], rng), true);
    store.insert("fusion.attn.b_f", random_tensor(&[da], rng), true);
    store.insert("fusion.attn.v", random_tensor(&[da], rng), true);
    store
}

/// Attention weights: `|sum(alpha) - 1|`, deviation from a scalar
/// recomputation, and the effect of shifting every score by a constant.
pub fn attention(seed: u64) -> (f64, f64, f64) {
    let mut rng = Rng::new(seed);
    let (n, d, da, batch) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 8), dims(&mut rng, 1, 6), dims(&mut rng, 1, 4));
    let store = attention_store(d, da, &mut rng);
    let feats: Vec<Tensor> = (0..n).map(|_| Tensor::uniform([batch, d], -3.0, 3.0, &mut rng)).collect();
    let mut s = Session::new(&store, false, Rng::new(0));
    let nodes: Vec<NodeId> = feats.iter().map(|t| s.input(t.clone())).collect();
    let (alphas, _) = fusion::attend(&mut s, &nodes).unwrap();
    let got = s.graph.value(alphas).data().to_vec();
    let (w, b, v) = (
        store.get("fusion.attn.w_f").unwrap().data(),
        store.get("fusion.attn.b_f").unwrap().data(),
        store.get("fusion.attn.v").unwrap().data(),
    );
    let mut sum_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for row in 0..batch {
        let scores: Vec<f64> = feats
            .iter()
            .map(|f| {
                let l = &f.data()[row * d..(row + 1) * d];
                (0..da)
                    .map(|j| v[j] * (b[j] + (0..d).map(|i| w[j * d + i] * l[i]).sum::<f64>()).tanh())
                    .sum()
            })
            .collect();
        let softmax = |sc: &[f64]| {
            let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let mine = &got[row * n..(row + 1) * n];
        sum_err = sum_err.max((mine.iter().sum::<f64>() - 1.0).abs());
        oracle_err = oracle_err.max(max_abs_diff(mine, &softmax(&scores)));
        let c = rng.uniform_range(-50.0, 50.0);
        let mut g = Graph::new();
        let raw = g.input(Tensor::new([n], scores.clone()).unwrap());
        let shifted = g.input(Tensor::new([n], scores.iter().map(|x| x + c).collect()).unwrap());
        let (a, b2) = (g.softmax(raw).unwrap(), g.softmax(shifted).unwrap());
        shift_err = shift_err.max(max_abs_diff(g.value(a).data(), g.value(b2).data()));
    }
    (sum_err, oracle_err, shift_err)
}

/// Classifier output: `|p_real + p_fake - 1|` and whether the predicted label
/// survives a constant shift of both logits.
pub fn classifier(seed: u64) -> (f64, bool) {
    let mut rng = Rng::new(seed);
    let (d, batch) = (dims(&mut rng, 1, 8), dims(&mut rng, 1, 6));
    let mut store = ParamStore::new();
    store.insert("fusion.cls.weight", Tensor::uniform([2, d], -3.0, 3.0, &mut rng), true);
    store.insert("fusion.cls.bias", random_tensor(&[2], &mut rng), true);
    let u = Tensor::uniform([batch, d], -3.0, 3.0, &mut rng);
    let mut s = Session::new(&store, false, Rng::new(0));
    let iu = s.input(u.clone());
    let p = fusion::classify(&mut s, iu).unwrap();
    let probs = s.graph.value(p).data().to_vec();
    let sum_err = probs.chunks(2).map(|r| (r[0] + r[1] - 1.0).abs()).fold(0.0, f64::max);
    let c = rng.uniform_range(-100.0, 100.0);
    let mut shifted = store.clone();
    for b in shifted.get_mut("fusion.cls.bias").unwrap().data_mut() {
        *b += c;
    }
    let mut s2 = Session::new(&shifted, false, Rng::new(0));
    let iu = s2.input(u);
    let p2 = fusion::classify(&mut s2, iu).unwrap();
    let labels = |pr: &[f64]| pr.chunks(2).map(|r| fusion::predicted_label(r[0], r[1])).collect::<Vec<u8>>();
    (sum_err, labels(&probs) == labels(s2.graph.value(p2).data()))
}

/// Whether every r and z gate value lies strictly inside (0, 1).
pub fn gru_gates_open(seed: u64) -> bool {
    let mut rng = Rng::new(seed);
    let (input, hidden, batch) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 5), dims(&mut rng, 1, 4));
    let store = gru_store(input, hidden, &mut rng, &["g"]);
    let v = Tensor::uniform([batch, input], -4.0, 4.0, &mut rng);
    let h = random_tensor(&[batch, hidden], &mut rng);
    let mut s = Session::new(&store, false, Rng::new(0));
    let (iv, ih) = (s.input(v), s.input(h));
    let st = pixelnet::gru_step(&mut s, "g", iv, ih).unwrap();
    [st.r, st.z]
        .iter()
        .all(|&n| s.graph.value(n).data().iter().all(|&g| g > 0.0 && g < 1.0))
}
