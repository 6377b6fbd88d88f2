//! Independent reference implementations and a finite-difference checker
//! shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::f64::consts::PI;

pub mod grad_cases;
pub mod oracle_cases;
pub mod run_cases;

use mvnn::tensor::{NodeId, ParamStore, Session};
use mvnn::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-4;

/// Entries whose analytic and numeric gradients are both below this are
/// compared absolutely; relative error is meaningless at round-off scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Loss used by the gradient checks: `sum(out * weights)` with fixed random
/// weights, so that no output element's gradient cancels by symmetry.
pub fn weighted_sum(s: &mut Session, out: NodeId, seed: u64) -> NodeId {
    let shape = s.graph.shape(out).to_vec();
    let w = s.input(random_tensor(&shape, &mut Rng::new(seed)));
    let prod = s.graph.mul(out, w).expect("same shape");
    s.graph.sum(prod)
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Entries whose +-1e-4 step crossed a ReLU or max-pool boundary and were
    /// re-measured with a smaller step.
    pub reduced_step: usize,
}

impl FdReport {
    pub fn absorb(&mut self, other: FdReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.reduced_step += other.reduced_step;
    }
}

fn eval_loss(store: &ParamStore, f: &dyn Fn(&mut Session) -> NodeId) -> (f64, Vec<u64>) {
    let mut s = Session::new(store, true, Rng::new(17));
    let loss = f(&mut s);
    (s.graph.value(loss).item(), s.graph.piecewise_pattern())
}

/// Central difference of one entry. The step starts at [`FD_STEP`] and is cut
/// by 10x while either evaluation lands on a different smooth piece than the
/// unperturbed pass; a difference across a kink does not estimate the
/// derivative at the point. Returns the estimate and the step used.
fn central_difference(
    work: &mut ParamStore,
    f: &dyn Fn(&mut Session) -> NodeId,
    name: &str,
    i: usize,
    pattern: &[u64],
) -> (f64, f64) {
    let orig = work.get(name).unwrap().data()[i];
    let mut h = FD_STEP;
    loop {
        work.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let (up, pu) = eval_loss(work, f);
        work.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let (down, pd) = eval_loss(work, f);
        work.get_mut(name).unwrap().data_mut()[i] = orig;
        let smooth = pu == pattern && pd == pattern;
        if smooth || h <= FD_STEP * 1e-4 {
            return ((up - down) / (2.0 * h), h);
        }
        h /= 10.0;
    }
}

/// Compares backprop gradients of every trainable entry of `store` with
/// central differences. `f` must build the same scalar loss each time it is
/// called on a fresh session (training mode, fixed session seed).
pub fn fd_check(store: &ParamStore, f: &dyn Fn(&mut Session) -> NodeId) -> FdReport {
    let mut s = Session::new(store, true, Rng::new(17));
    let loss = f(&mut s);
    s.graph.backward(loss).expect("scalar loss");
    let analytic = s.param_grads();
    let pattern = s.graph.piecewise_pattern();
    let mut work = store.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        reduced_step: 0,
    };
    for (name, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let (n, h) = central_difference(&mut work, f, &name, i, &pattern);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR);
            report.checked += 1;
            if h < FD_STEP {
                report.reduced_step += 1;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {n:e}, step {h:e}");
            }
        }
    }
    report
}

/// Adds uniform noise in `[-scale, scale]` to every trainable entry so that no
/// unit starts exactly on a ReLU or max-pool boundary (zero biases feeding
/// all-zero inputs otherwise do).
pub fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    for name in store.trainable_names() {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += rng.uniform_range(-scale, scale);
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Leading zero padding of a "same" convolution along one axis.
pub fn same_pad(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(len);
    (total / 2, out)
}

/// `x: [cin x len]`, `w: [cout x cin x k]`.
pub fn conv1d(x: &[f64], cin: usize, len: usize, w: &[f64], cout: usize, k: usize, stride: usize, pad: usize, out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * out_len];
    for o in 0..cout {
        for t in 0..out_len {
            let mut acc = 0.0;
            for c in 0..cin {
                for j in 0..k {
                    let pos = (t * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        acc += w[(o * cin + c) * k + j] * x[c * len + pos as usize];
                    }
                }
            }
            out[o * out_len + t] = acc;
        }
    }
    out
}

/// `x: [cin x h x w]`, `k: [cout x cin x kh x kw]`, square stride and padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    (pt, pl): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (oy * stride + dy) as isize - pt as isize;
                            let xx = (ox * stride + dx) as isize - pl as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += k[((o * cin + c) * kh + dy) * kw + dx]
                                    * x[(c * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Returns the pooled values and the flat argmax (first maximum in scan order).
pub fn maxpool1d(x: &[f64], window: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = (x.len() - window) / stride + 1;
    let mut vals = Vec::new();
    let mut idx = Vec::new();
    for t in 0..out_len {
        let win = &x[t * stride..t * stride + window];
        let mut best = 0;
        for (j, &v) in win.iter().enumerate() {
            if v > win[best] {
                best = j;
            }
        }
        vals.push(win[best]);
        idx.push(t * stride + best);
    }
    (vals, idx)
}

/// Two-dimensional DCT-II of an 8x8 block by the defining double sum.
/// `out[v * 8 + u]`, `v` vertical frequency.
pub fn dct_definition(block: &[f64]) -> Vec<f64> {
    let a = |f: usize| if f == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
    let mut out = vec![0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += block[y * 8 + x]
                        * ((2 * y + 1) as f64 * v as f64 * PI / 16.0).cos()
                        * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
                }
            }
            out[v * 8 + u] = a(v) * a(u) * acc;
        }
    }
    out
}

pub fn dft_magnitude(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in row.iter().enumerate() {
                let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Counts, for every zig-zag position and integer value in [-250, 249], how
/// many blocks have that rounded coefficient (out-of-range values clamp).
pub fn histogram_by_counting(blocks: &[[f64; 64]], zigzag: &[usize; 64]) -> Vec<f64> {
    let mut out = vec![0.0; 64 * 500];
    for (row, &nat) in zigzag.iter().enumerate() {
        for bin in 0..500 {
            let value = bin as i64 - 250;
            let count = blocks
                .iter()
                .filter(|b| {
                    let r = b[nat].round() as i64;
                    let clamped = r.clamp(-250, 249);
                    clamped == value
                })
                .count();
            out[row * 500 + bin] = count as f64;
        }
    }
    out
}

pub struct ScalarGru<'a> {
    pub w_r: &'a [f64],
    pub w_z: &'a [f64],
    pub w_h: &'a [f64],
    pub b_r: &'a [f64],
    pub b_z: &'a [f64],
    pub b_h: &'a [f64],
    pub input: usize,
    pub hidden: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ScalarGru<'_> {
    pub fn from_store<'a>(store: &'a ParamStore, prefix: &str, input: usize, hidden: usize) -> ScalarGru<'a> {
        let get = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap().data();
        ScalarGru {
            w_r: get("w_r"),
            w_z: get("w_z"),
            w_h: get("w_h"),
            b_r: get("b_r"),
            b_z: get("b_z"),
            b_h: get("b_h"),
            input,
            hidden,
        }
    }

    /// One step for a single sample; returns `(r, z, h_tilde, h)`.
    pub fn step(&self, v: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let cols = self.input + self.hidden;
        let dot = |w: &[f64], j: usize, a: &[f64], b: &[f64]| {
            let mut acc = 0.0;
            for i in 0..self.input {
                acc += w[j * cols + i] * a[i];
            }
            for i in 0..self.hidden {
                acc += w[j * cols + self.input + i] * b[i];
            }
            acc
        };
        let mut r = vec![0.0; self.hidden];
        let mut z = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            r[j] = sigmoid(dot(self.w_r, j, v, h) + self.b_r[j]);
            z[j] = sigmoid(dot(self.w_z, j, v, h) + self.b_z[j]);
        }
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut ht = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            ht[j] = (dot(self.w_h, j, v, &rh) + self.b_h[j]).tanh();
            out[j] = (1.0 - z[j]) * h[j] + z[j] * ht[j];
        }
        (r, z, ht, out)
    }
}

/// Bidirectional run over one sample's sequence; `out[t] = [fwd_t, bwd_t]`.
pub fn scalar_bigru(fwd: &ScalarGru, bwd: &ScalarGru, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let hidden = fwd.hidden;
    let mut f = vec![vec![0.0; hidden]; seq.len()];
    let mut b = vec![vec![0.0; hidden]; seq.len()];
    let mut h = vec![0.0; hidden];
    for t in 0..seq.len() {
        h = fwd.step(&seq[t], &h).3;
        f[t] = h.clone();
    }
    let mut h = vec![0.0; hidden];
    for t in (0..seq.len()).rev() {
        h = bwd.step(&seq[t], &h).3;
        b[t] = h.clone();
    }
    f.into_iter().zip(b).map(|(mut a, b)| {
        a.extend(b);
        a
    }).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
