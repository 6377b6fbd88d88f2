use super::gemm::{gemm, MatRef};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic on each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(len / stride)`, zero padding split evenly (extra on the far side).
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same() -> Self {
        Self {
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: 1,
            padding: Padding::Valid,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    pl: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pt == 0 && self.pl == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.pt as isize;
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, slot) in out.iter_mut().enumerate() {
                            let ix = (ox * self.sw + kj) as isize - self.pl as isize;
                            *slot = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + ki) as isize - self.pt as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.sw + kj) as isize - self.pl as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(pad_before, output_len)` along one axis.
fn axis_geometry(len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    match padding {
        Padding::Valid => {
            if k > len {
                return Err(Error::dim(format!(
                    "kernel extent {k} exceeds input extent {len}"
                )));
            }
            Ok((0, (len - k) / stride + 1))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Ok((total / 2, out))
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    Softmax(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    RowScale {
        x: NodeId,
        s: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    Bce {
        p: NodeId,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive applications. Node ids are handed out in creation
/// order, so the node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient left on a differentiable leaf by the last [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("unary: shape preserved");
        let ng = self.needs(x);
        self.push(out, op, ng)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.data(a), k),
            MatRef::row_major(self.data(b), n),
            &mut out,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Fully connected layer `x * w^T + b` with `x: [batch x in]`, `w: [out x in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for {fout} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; batch * fout];
        gemm(
            batch,
            fin,
            fout,
            MatRef::row_major(self.data(x), fin),
            MatRef::transposed(self.data(w), fin),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new([batch, fout], out)?, Op::Linear { x, w, b }, ng))
    }

    /// 1-D cross-correlation. `x: [c_in x len]` or `[batch x c_in x len]`,
    /// `kernels: [c_out x c_in x k]`, optional `bias: [c_out]`.
    pub fn conv1d(&mut self, x: NodeId, kernels: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, cin, len, batched) = match sx.as_slice() {
            [c, l] => (1, *c, *l, false),
            [b, c, l] => (*b, *c, *l, true),
            _ => return Err(Error::dim(format!("conv1d: input must be 2-D or 3-D, got {sx:?}"))),
        };
        if sk.len() != 3 || sk[1] != cin {
            return Err(Error::dim(format!(
                "conv1d: kernels {sk:?} incompatible with input {sx:?}"
            )));
        }
        let (pl, ol) = axis_geometry(len, sk[2], spec.stride, spec.padding)?;
        let geom = ConvGeom {
            batch,
            cin,
            h: 1,
            w: len,
            cout: sk[0],
            kh: 1,
            kw: sk[2],
            sh: 1,
            sw: spec.stride,
            pt: 0,
            pl,
            oh: 1,
            ow: ol,
        };
        let shape = if batched {
            vec![batch, sk[0], ol]
        } else {
            vec![sk[0], ol]
        };
        self.conv(x, kernels, bias, geom, shape)
    }

    /// 2-D cross-correlation. `x: [c_in x h x w]` or `[batch x c_in x h x w]`,
    /// `kernels: [c_out x c_in x kh x kw]`, optional `bias: [c_out]`.
    pub fn conv2d(&mut self, x: NodeId, kernels: NodeId, bias: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, cin, h, w, batched) = match sx.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [b, c, h, w] => (*b, *c, *h, *w, true),
            _ => return Err(Error::dim(format!("conv2d: input must be 3-D or 4-D, got {sx:?}"))),
        };
        if sk.len() != 4 || sk[1] != cin {
            return Err(Error::dim(format!(
                "conv2d: kernels {sk:?} incompatible with input {sx:?}"
            )));
        }
        let (pt, oh) = axis_geometry(h, sk[2], spec.stride, spec.padding)?;
        let (pl, ow) = axis_geometry(w, sk[3], spec.stride, spec.padding)?;
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w,
            cout: sk[0],
            kh: sk[2],
            kw: sk[3],
            sh: spec.stride,
            sw: spec.stride,
            pt,
            pl,
            oh,
            ow,
        };
        let shape = if batched {
            vec![batch, sk[0], oh, ow]
        } else {
            vec![sk[0], oh, ow]
        };
        self.conv(x, kernels, bias, geom, shape)
    }

    fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom, shape: Vec<usize>) -> Result<NodeId> {
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::dim(format!(
                    "conv: bias {:?} for {} output channels",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let (k, p) = (geom.patch(), geom.positions());
        let in_size = geom.cin * geom.h * geom.w;
        let mut out = vec![0.0; geom.batch * geom.cout * p];
        let mut cols = if geom.pointwise() { Vec::new() } else { vec![0.0; k * p] };
        let xs = self.data(x);
        let ws = self.data(w);
        for bi in 0..geom.batch {
            let xb = &xs[bi * in_size..(bi + 1) * in_size];
            let cref: &[f64] = if geom.pointwise() {
                xb
            } else {
                geom.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[bi * geom.cout * p..(bi + 1) * geom.cout * p];
            gemm(geom.cout, k, p, MatRef::row_major(ws, k), MatRef::row_major(cref, p), ob, false);
            if let Some(b) = b {
                for (row, &bv) in ob.chunks_mut(p).zip(self.data(b)) {
                    row.iter_mut().for_each(|o| *o += bv);
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv { x, w, b, geom }, ng))
    }

    /// Max pooling over the last axis.
    pub fn maxpool1d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("maxpool1d on a scalar"));
        }
        let len = shape[shape.len() - 1];
        let planes = shape[..shape.len() - 1].iter().product();
        let (_, ol) = self.pool_axis(len, window, stride)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = ol;
        self.pool(x, planes, (1, len), (1, window), (1, stride), (1, ol), out_shape)
    }

    /// Max pooling over the last two axes with a square window.
    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("maxpool2d needs at least 2 axes, got {shape:?}")));
        }
        let n = shape.len();
        let (h, w) = (shape[n - 2], shape[n - 1]);
        let planes = shape[..n - 2].iter().product();
        let (_, oh) = self.pool_axis(h, window, stride)?;
        let (_, ow) = self.pool_axis(w, window, stride)?;
        let mut out_shape = shape.clone();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        self.pool(x, planes, (h, w), (window, window), (stride, stride), (oh, ow), out_shape)
    }

    fn pool_axis(&self, len: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
        if window == 0 {
            return Err(Error::Config("pooling window must be positive".into()));
        }
        axis_geometry(len, window, stride, Padding::Valid)
    }

    #[allow(clippy::too_many_arguments)]
    fn pool(
        &mut self,
        x: NodeId,
        planes: usize,
        (h, w): (usize, usize),
        (wh, ww): (usize, usize),
        (sh, sw): (usize, usize),
        (oh, ow): (usize, usize),
        out_shape: Vec<usize>,
    ) -> Result<NodeId> {
        let xs = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * sh * w + ox * sw;
                    let mut best = xs[best_idx];
                    for dy in 0..wh {
                        for dx in 0..ww {
                            let idx = base + (oy * sh + dy) * w + ox * sw + dx;
                            // strict comparison keeps the lowest index on ties
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxPool { x, argmax }, ng))
    }

    /// Which side of each non-differentiable point the recorded forward pass
    /// took: ReLU input signs (bit-packed) followed by max-pool argmaxes. Two
    /// passes with equal patterns lie on the same smooth piece.
    pub fn piecewise_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for chunk in self.data(*x).chunks(64) {
                        let word = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |w, (i, &a)| w | (u64::from(a > 0.0) << i));
                        out.push(word);
                    }
                }
                Op::MaxPool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |a| {
                if a >= 0.0 {
                    1.0 / (1.0 + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(x, |a| scale * a + shift, Op::Affine { x, scale })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let chunk = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.data(id)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let row = o * shape[axis] * inner;
            out.extend_from_slice(&src[row + start * inner..row + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.data().iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = *v.shape().last().ok_or_else(|| Error::dim("softmax on a scalar"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                sum += *a;
            }
            row.iter_mut().for_each(|a| *a /= sum);
        }
        let shape = v.shape().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), ng))
    }

    /// Inverted dropout. Identity (same node) outside training or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng, training: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Batch normalization over axis 1 of `x: [batch x channels x ...]`.
    ///
    /// In training mode the batch statistics are used and the updated running
    /// statistics are returned; otherwise `stats` is used as is.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &RunningStats,
        training: bool,
    ) -> Result<(NodeId, Option<RunningStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batchnorm needs [batch x channels ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim(format!("batchnorm parameters do not match {c} channels")));
        }
        let count = n * inner;
        if training && count < 2 {
            return Err(Error::Usage(
                "batchnorm in training mode needs at least 2 values per channel".into(),
            ));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for ni in 0..n {
                for (ci, m) in mean.iter_mut().enumerate() {
                    let off = (ni * c + ci) * inner;
                    *m += xs[off..off + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * inner;
                    var[ci] += xs[off..off + inner]
                        .iter()
                        .map(|v| (v - mean[ci]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * inner;
                for i in off..off + inner {
                    xhat[i] = (xs[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + b[ci];
                }
            }
        }
        let updated = training.then(|| {
            let unbias = count as f64 / (count as f64 - 1.0);
            RunningStats {
                mean: stats
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * m)
                    .collect(),
                var: stats
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * v * unbias)
                    .collect(),
            }
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        );
        Ok((id, updated))
    }

    /// Scales each row of `x: [batch x d]` by the matching entry of `s: [batch x 1]`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 2 || ss != [sx[0], 1] {
            return Err(Error::dim(format!("row_scale: {sx:?} by {ss:?}")));
        }
        let d = sx[1];
        let scales = self.data(s);
        let data = self
            .data(x)
            .chunks(d)
            .zip(scales)
            .flat_map(|(row, &k)| row.iter().map(move |a| a * k))
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::RowScale { x, s }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Mean binary cross-entropy of `p: [batch x 2]` (column 1 = fake) against
    /// labels in `[0, 1]`. The fake probability is clamped to
    /// `[1e-12, 1 - 1e-12]`; clamped entries pass no gradient.
    pub fn bce_loss(&mut self, p: NodeId, labels: &[f64]) -> Result<NodeId> {
        let sp = self.shape(p);
        if sp.len() != 2 || sp[1] != 2 || sp[0] != labels.len() {
            return Err(Error::dim(format!(
                "bce_loss: probabilities {sp:?} for {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::Usage("labels must lie in [0, 1]".into()));
        }
        let probs = self.data(p);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let q = probs[2 * i + 1].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node. Gradients of differentiable leaves are
    /// overwritten, and summed over every path that reaches them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.set_grad(g);
            } else {
                self.propagate(id, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut give = |target: NodeId, contribution: Vec<f64>| {
            if !self.needs(target) {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::row_major(g, n), MatRef::transposed(self.data(*b), n), &mut da, false);
                    give(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, MatRef::transposed(self.data(*a), k), MatRef::row_major(g, n), &mut db, false);
                    give(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (batch, fin, fout) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    gemm(batch, fout, fin, MatRef::row_major(g, fout), MatRef::row_major(self.data(*w), fin), &mut dx, false);
                    give(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, batch, fin, MatRef::transposed(g, fout), MatRef::row_major(self.data(*x), fin), &mut dw, false);
                    give(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    give(*b, db);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (k, p) = (geom.patch(), geom.positions());
                let in_size = geom.cin * geom.h * geom.w;
                let out_size = geom.cout * p;
                let xs = self.data(*x);
                let ws = self.data(*w);
                let want_x = self.needs(*x);
                let want_w = self.needs(*w);
                let mut dx = if want_x { vec![0.0; xs.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0; ws.len()] } else { Vec::new() };
                let mut cols = if geom.pointwise() { Vec::new() } else { vec![0.0; k * p] };
                let mut dcols = if geom.pointwise() || !want_x { Vec::new() } else { vec![0.0; k * p] };
                for bi in 0..geom.batch {
                    let gb = &g[bi * out_size..(bi + 1) * out_size];
                    let xb = &xs[bi * in_size..(bi + 1) * in_size];
                    if want_w {
                        let cref: &[f64] = if geom.pointwise() {
                            xb
                        } else {
                            geom.im2col(xb, &mut cols);
                            &cols
                        };
                        gemm(geom.cout, p, k, MatRef::row_major(gb, p), MatRef::transposed(cref, p), &mut dw, true);
                    }
                    if want_x {
                        let dxb = &mut dx[bi * in_size..(bi + 1) * in_size];
                        if geom.pointwise() {
                            gemm(k, geom.cout, p, MatRef::transposed(ws, k), MatRef::row_major(gb, p), dxb, true);
                        } else {
                            gemm(k, geom.cout, p, MatRef::transposed(ws, k), MatRef::row_major(gb, p), &mut dcols, false);
                            geom.col2im(&dcols, dxb);
                        }
                    }
                }
                if want_x {
                    give(*x, dx);
                }
                if want_w {
                    give(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; geom.cout];
                    for gb in g.chunks(out_size) {
                        for (d, row) in db.iter_mut().zip(gb.chunks(p)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                    give(*b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
                give(*x, dx);
            }
            Op::Relu(x) => {
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                give(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                give(*x, dx);
            }
            Op::Tanh(x) => {
                let dx = out.iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect();
                give(*x, dx);
            }
            Op::Add(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                give(*a, g.to_vec());
                give(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                give(*a, g.iter().zip(db).map(|(gv, y)| gv * y).collect());
                give(*b, g.iter().zip(da).map(|(gv, x)| gv * x).collect());
            }
            Op::Affine { x, scale } => {
                give(*x, g.iter().map(|gv| gv * scale).collect());
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let chunk = self.shape(id)[*axis] * inner;
                    if self.needs(id) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        give(id, d);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, inner) = outer_inner(src_shape, *axis);
                let full = src_shape[*axis] * inner;
                let part = node.value.shape()[*axis] * inner;
                let mut dx = vec![0.0; outer * full];
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    dx[dst..dst + part].copy_from_slice(&g[o * part..(o + 1) * part]);
                }
                give(*x, dx);
            }
            Op::Reshape(x) => give(*x, g.to_vec()),
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((d, y), gv) in dx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = y.iter().zip(gv).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        d[i] = y[i] * (gv[i] - dot);
                    }
                }
                give(*x, dx);
            }
            Op::Dropout { x, mask } => {
                give(*x, g.iter().zip(mask).map(|(gv, m)| gv * m).collect());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (n * inner) as f64;
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * inner;
                        for i in off..off + inner {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * inner;
                            let scale = gam[ci] * inv_std[ci];
                            for i in off..off + inner {
                                dx[i] = if *training {
                                    scale / count * (count * g[i] - dbeta[ci] - xhat[i] * dgamma[ci])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    give(*x, dx);
                }
                give(*gamma, dgamma);
                give(*beta, dbeta);
            }
            Op::RowScale { x, s } => {
                let d = self.shape(*x)[1];
                let xs = self.data(*x);
                let ss = self.data(*s);
                if self.needs(*x) {
                    let dx = g
                        .chunks(d)
                        .zip(ss)
                        .flat_map(|(row, &k)| row.iter().map(move |gv| gv * k))
                        .collect();
                    give(*x, dx);
                }
                let ds = g
                    .chunks(d)
                    .zip(xs.chunks(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                give(*s, ds);
            }
            Op::Sum(x) => give(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                give(*x, vec![g[0] / n as f64; n]);
            }
            Op::Bce { p, labels } => {
                let probs = self.data(*p);
                let batch = labels.len() as f64;
                let mut dp = vec![0.0; probs.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let q = probs[2 * i + 1];
                    if q > PROB_FLOOR && q < 1.0 - PROB_FLOOR {
                        dp[2 * i + 1] = -g[0] * (y / q - (1.0 - y) / (1.0 - q)) / batch;
                    }
                }
                give(*p, dp);
            }
        }
    }
}

/// Clamp applied to the fake-class probability inside the loss.
pub(crate) const PROB_FLOOR: f64 = 1e-12;
