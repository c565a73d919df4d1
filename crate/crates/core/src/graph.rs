//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations compute their forward value at construction time and record
//! themselves as nodes; [`Graph::backward`] replays the tape in reverse,
//! accumulating gradients additively in reverse topological (= reverse
//! insertion) order, which makes gradient values bit-reproducible for a
//! fixed op sequence. A `Graph` is confined to one thread; node values are
//! plain [`Tensor`]s and can be moved out freely.

use crate::tensor::{broadcast_shapes, broadcast_strides, strides_for, Tensor};
use crate::Error;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SmoothL1(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    MaxPool2d { x: NodeId, k: usize, stride: usize },
    Softmax { x: NodeId, axis: usize, temp: f64 },
    LogSoftmax { x: NodeId, axis: usize, temp: f64 },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis { x: NodeId, axis: usize },
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    GatherRows { x: NodeId, rows: Vec<usize> },
    GatherRowCol { x: NodeId, cols: Vec<usize> },
    GatherPixels { x: NodeId, coords: Vec<(usize, usize, usize)> },
    GradReverse { x: NodeId, beta: f64 },
    ResizeBilinear(NodeId),
    GlobalAvgPool(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// row-major helper around matrixmultiply's stride-based dgemm
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unpack one image's receptive fields into columns: out is
/// `[C*kh*kw, Ho*Wo]` row-major for the GEMM-based convolution.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let plane = h * w;
    let owo = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * owo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cols[dst..dst + wo].fill(0.0);
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[dst + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image gradient (inverse of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let plane = h * w;
    let owo = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * owo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_row + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Walk an output shape while tracking the flat offsets of two
/// broadcast-strided operands.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Lane decomposition for per-axis ops: (outer, len, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf treated as constant.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf whose gradient participation is controlled by `trainable`.
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> NodeId {
        self.push(t, trainable, Op::Leaf)
    }

    // ── elementwise binary ops (NumPy-style broadcasting) ───────────────

    fn binary(&mut self, a: NodeId, b: NodeId, which: u8) -> Result<NodeId, Error> {
        let out_shape = broadcast_shapes(self.nodes[a].value.shape(), self.nodes[b].value.shape())?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        if va.shape() == vb.shape() {
            let (da, db) = (va.data(), vb.data());
            match which {
                0 => out.iter_mut().enumerate().for_each(|(i, o)| *o = da[i] + db[i]),
                1 => out.iter_mut().enumerate().for_each(|(i, o)| *o = da[i] - db[i]),
                2 => out.iter_mut().enumerate().for_each(|(i, o)| *o = da[i] * db[i]),
                _ => out.iter_mut().enumerate().for_each(|(i, o)| *o = da[i] / db[i]),
            }
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = match which {
                    0 => da[ia] + db[ib],
                    1 => da[ia] - db[ib],
                    2 => da[ia] * db[ib],
                    _ => da[ia] / db[ib],
                };
            });
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.needs(&[a, b]);
        let op = match which {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        self.binary(a, b, 2)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        self.binary(a, b, 3)
    }

    // ── elementwise unary ops ────────────────────────────────────────────

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = &self.nodes[x].value;
        let data: Vec<f64> = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x].requires_grad;
        self.push(t, rg, op)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Neg(x), |a| -a)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c), |a| c * a)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), |a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log. Callers clamp away from zero first; see `clamp`.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, Op::Clamp(x, lo, hi), |a| a.clamp(lo, hi))
    }

    /// Elementwise smooth-L1: `0.5x^2` inside |x|<1, `|x|-0.5` outside.
    pub fn smooth_l1(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::SmoothL1(x), |a| {
            if a.abs() < 1.0 {
                0.5 * a * a
            } else {
                a.abs() - 0.5
            }
        })
    }

    /// Identity forward; backward multiplies the upstream gradient by `-beta`.
    pub fn gradient_reversal(&mut self, x: NodeId, beta: f64) -> Result<NodeId, Error> {
        if beta < 0.0 {
            return Err(Error::Invalid(format!("gradient reversal beta must be >= 0, got {beta}")));
        }
        let t = self.nodes[x].value.clone();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::GradReverse { x, beta }))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul shapes {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        dgemm(
            m, k, n, 1.0,
            self.nodes[a].value.data(), k as isize, 1,
            self.nodes[b].value.data(), n as isize, 1,
            0.0, &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    /// 2-D convolution of `[N,C,H,W]` with `[F,C,kh,kw]` plus optional
    /// per-channel bias `[F]`, zero padding, floor output size.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, Error> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects 4-D input/weight, got {:?} / {:?}", xs, ws)));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d channels {} vs weight {}", xs[1], ws[1])));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(bb) = b {
            let bs = self.nodes[bb].value.shape();
            if bs != [f] {
                return Err(Error::Shape(format!("conv2d bias shape {:?}, want [{}]", bs, f)));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!("conv2d kernel {}x{} larger than padded input", kh, kw)));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let owo = ho * wo;
        let mut out = vec![0.0; n * f * owo];
        let mut cols = vec![0.0; ckk * owo];
        for img in 0..n {
            let xi = &self.nodes[x].value.data()[img * c * h * wd..(img + 1) * c * h * wd];
            im2col(xi, c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
            dgemm(
                f, ckk, owo, 1.0,
                self.nodes[w].value.data(), ckk as isize, 1,
                &cols, owo as isize, 1,
                0.0, &mut out[img * f * owo..(img + 1) * f * owo],
            );
            if let Some(bb) = b {
                let bias = self.nodes[bb].value.data();
                let base = img * f * owo;
                for fi in 0..f {
                    let bv = bias[fi];
                    for o in &mut out[base + fi * owo..base + (fi + 1) * owo] {
                        *o += bv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, f, ho, wo], out)?;
        let mut ids = vec![x, w];
        if let Some(bb) = b {
            ids.push(bb);
        }
        let rg = self.needs(&ids);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, Error> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("max_pool2d expects 4-D input, got {:?}", xs)));
        }
        if k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::Invalid(format!("max_pool2d window {k} stride {stride} on {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let mut out = vec![0.0; n * c * ho * wo];
        let data = self.nodes[x].value.data();
        for img in 0..n {
            for ci in 0..c {
                let plane = &data[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                let base = (img * c + ci) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..k {
                            for kx in 0..k {
                                let v = plane[(oy * stride + ky) * w + ox * stride + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[base + oy * wo + ox] = best;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::MaxPool2d { x, k, stride }))
    }

    // ── softmax family ───────────────────────────────────────────────────

    /// Softmax of `x / temp` along `axis` (max-subtracted for stability).
    pub fn softmax(&mut self, x: NodeId, axis: usize, temp: f64) -> Result<NodeId, Error> {
        self.softmax_impl(x, axis, temp, false)
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize, temp: f64) -> Result<NodeId, Error> {
        self.softmax_impl(x, axis, temp, true)
    }

    fn softmax_impl(&mut self, x: NodeId, axis: usize, temp: f64, log: bool) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {:?}", shape)));
        }
        if temp <= 0.0 {
            return Err(Error::Invalid(format!("softmax temperature must be > 0, got {temp}")));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(data[at(j)] / temp);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    sum += (data[at(j)] / temp - m).exp();
                }
                if log {
                    let lse = m + sum.ln();
                    for j in 0..len {
                        out[at(j)] = data[at(j)] / temp - lse;
                    }
                } else {
                    for j in 0..len {
                        out[at(j)] = (data[at(j)] / temp - m).exp() / sum;
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.nodes[x].requires_grad;
        let op = if log {
            Op::LogSoftmax { x, axis, temp }
        } else {
            Op::Softmax { x, axis, temp }
        };
        Ok(self.push(t, rg, op))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel().max(1);
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(s / n as f64), rg, Op::MeanAll(x))
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum_axis axis {axis} out of range for {:?}", shape)));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = (o * len + j) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += data[src + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].to_vec();
        new_shape.extend_from_slice(&shape[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let t = Tensor::new(new_shape, out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, Error> {
        let len = self.nodes[x].value.shape()[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    // ── shape ops ────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, Error> {
        let t = self.nodes[x].value.clone().reshaped(shape)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Permute axes: `out.shape[i] = in.shape[perm[i]]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, Error> {
        let in_shape = self.nodes[x].value.shape().to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {:?} for rank {rank}", perm)));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_for(&in_shape);
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; data.len()];
        let zeros = vec![0usize; rank];
        for_each_broadcast(&out_shape, &mapped, &zeros, |o, ia, _| {
            out[o] = data[ia];
        });
        let t = Tensor::new(out_shape, out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, Error> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = self.nodes[xs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {:?}", first)));
        }
        let mut total_axis = 0;
        for &x in xs {
            let s = self.nodes[x].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat shape {:?} incompatible with {:?}", s, first)));
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let out_block = total_axis * inner;
        let mut offset = 0;
        for &x in xs {
            let len = self.nodes[x].value.shape()[axis];
            let block = len * inner;
            let data = self.nodes[x].value.data();
            for o in 0..outer {
                out[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&data[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.needs(xs);
        Ok(self.push(t, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {:?}",
                shape
            )));
        }
        let (outer, alen, inner) = lanes(&shape, axis);
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * alen + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::Slice { x, axis, start, len }))
    }

    /// Select rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather_rows expects 2-D input, got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows row {bad} out of {r}")));
        }
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; rows.len() * c];
        for (k, &i) in rows.iter().enumerate() {
            out[k * c..(k + 1) * c].copy_from_slice(&data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Pick one column per row of a 2-D tensor: `out[i] = x[i, cols[i]]`.
    pub fn gather_row_col(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 2 || cols.len() != shape[0] {
            return Err(Error::Shape(format!(
                "gather_row_col wants one column per row of {:?}, got {} indices",
                shape,
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= shape[1]) {
            return Err(Error::Shape(format!("gather_row_col column {bad} out of {}", shape[1])));
        }
        let data = self.nodes[x].value.data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| data[i * shape[1] + j]).collect();
        let t = Tensor::new(vec![shape[0]], out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::GatherRowCol { x, cols: cols.to_vec() }))
    }

    /// Gather channel vectors at spatial coordinates of an `[N,C,H,W]`
    /// tensor: output `[P, C]` for coords `(n, y, x)`.
    pub fn gather_pixels(&mut self, x: NodeId, coords: &[(usize, usize, usize)]) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("gather_pixels expects 4-D input, got {:?}", shape)));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if let Some(&bad) = coords.iter().find(|&&(ni, yi, xi)| ni >= n || yi >= h || xi >= w) {
            return Err(Error::Shape(format!("gather_pixels coord {:?} out of {:?}", bad, shape)));
        }
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; coords.len() * c];
        for (p, &(ni, yi, xi)) in coords.iter().enumerate() {
            for ci in 0..c {
                out[p * c + ci] = data[((ni * c + ci) * h + yi) * w + xi];
            }
        }
        let t = Tensor::new(vec![coords.len(), c], out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::GatherPixels { x, coords: coords.to_vec() }))
    }

    /// Bilinear resize of `[N,C,H,W]` with half-pixel sample centers.
    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("resize_bilinear expects 4-D input, got {:?}", shape)));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::Invalid("resize_bilinear to empty output".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for img in 0..n {
            for ci in 0..c {
                let plane = &data[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                let base = (img * c + ci) * oh * ow;
                for oy in 0..oh {
                    let (y0, y1, fy) = resample_coord(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = resample_coord(ox, ow, w);
                        let v = plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                            + plane[y0 * w + x1] * (1.0 - fy) * fx
                            + plane[y1 * w + x0] * fy * (1.0 - fx)
                            + plane[y1 * w + x1] * fy * fx;
                        out[base + oy * ow + ox] = v;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::ResizeBilinear(x)))
    }

    /// Spatial mean of `[N,C,H,W]` down to `[N,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, Error> {
        let shape = self.nodes[x].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool expects 4-D input, got {:?}", shape)));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = (h * w) as f64;
        let data = self.nodes[x].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = data[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let t = Tensor::new(vec![n, c], out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(t, rg, Op::GlobalAvgPool(x)))
    }

    // ── composites ───────────────────────────────────────────────────────

    /// `x [N,D] * w [D,O] + b [O]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Euclidean norm of all elements, as a scalar node.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let sq = self.square(x);
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    // ── backward ─────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; numel]);
        // borrow dance: grad lives inside self, contributions computed before
        contrib(grad);
    }

    /// Reverse pass from a scalar seed node. Gradients accumulate
    /// additively in reverse insertion order.
    pub fn backward(&mut self, seed: NodeId) -> Result<(), Error> {
        if self.nodes[seed].value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed].value.shape()
            )));
        }
        if !self.nodes[seed].requires_grad {
            return Ok(());
        }
        self.nodes[seed].grad = Some(vec![1.0]);
        for id in (0..=seed).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.backprop_broadcast(id, a, &g, None);
                    self.backprop_broadcast(id, b, &g, None);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.backprop_broadcast(id, a, &g, None);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.backprop_broadcast(id, b, &neg, None);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.backprop_broadcast(id, a, &g, Some(b));
                    self.backprop_broadcast(id, b, &g, Some(a));
                }
                Op::Div(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                    if self.nodes[a].requires_grad {
                        let out_shape = self.nodes[id].value.shape().to_vec();
                        let sa = broadcast_strides(self.nodes[a].value.shape(), &out_shape);
                        let sb = broadcast_strides(self.nodes[b].value.shape(), &out_shape);
                        let vb = self.nodes[b].value.data().to_vec();
                        let mut da = vec![0.0; self.nodes[a].value.numel()];
                        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                            da[ia] += g[o] / vb[ib];
                        });
                        self.accumulate(a, |gr| gr.iter_mut().zip(&da).for_each(|(x, d)| *x += d));
                    }
                    if self.nodes[b].requires_grad {
                        let out_shape = self.nodes[id].value.shape().to_vec();
                        let sa = broadcast_strides(self.nodes[a].value.shape(), &out_shape);
                        let sb = broadcast_strides(self.nodes[b].value.shape(), &out_shape);
                        let va = self.nodes[a].value.data().to_vec();
                        let vb = self.nodes[b].value.data().to_vec();
                        let mut db = vec![0.0; self.nodes[b].value.numel()];
                        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                            db[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib]);
                        });
                        self.accumulate(b, |gr| gr.iter_mut().zip(&db).for_each(|(x, d)| *x += d));
                    }
                }
                Op::Neg(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.accumulate(x, |gr| gr.iter_mut().zip(&g).for_each(|(a, b)| *a -= b));
                }
                Op::Scale(x, c) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.accumulate(x, |gr| gr.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b));
                }
                Op::AddScalar(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.accumulate(x, |gr| gr.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                }
                Op::Relu(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let v = self.nodes[x].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            if v[i] > 0.0 {
                                gr[i] += g[i];
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let y = self.nodes[id].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            gr[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Exp(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let y = self.nodes[id].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            gr[i] += g[i] * y[i];
                        }
                    });
                }
                Op::Log(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let v = self.nodes[x].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            gr[i] += g[i] / v[i];
                        }
                    });
                }
                Op::Sqrt(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let y = self.nodes[id].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            gr[i] += g[i] * 0.5 / y[i];
                        }
                    });
                }
                Op::Square(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let v = self.nodes[x].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            gr[i] += g[i] * 2.0 * v[i];
                        }
                    });
                }
                Op::Clamp(x, lo, hi) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let v = self.nodes[x].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            if v[i] > lo && v[i] < hi {
                                gr[i] += g[i];
                            }
                        }
                    });
                }
                Op::SmoothL1(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let v = self.nodes[x].value.data().to_vec();
                    self.accumulate(x, |gr| {
                        for i in 0..gr.len() {
                            let d = if v[i].abs() < 1.0 { v[i] } else { v[i].signum() };
                            gr[i] += g[i] * d;
                        }
                    });
                }
                Op::GradReverse { x, beta } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.accumulate(x, |gr| {
                        gr.iter_mut().zip(&g).for_each(|(a, b)| *a += -beta * b)
                    });
                }
                Op::MatMul(a, b) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let (m, k) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b].value.shape()[1];
                    if self.nodes[a].requires_grad {
                        // dA = G . B^T
                        let vb = self.nodes[b].value.data().to_vec();
                        let mut da = vec![0.0; m * k];
                        dgemm(m, n, k, 1.0, &g, n as isize, 1, &vb, 1, n as isize, 0.0, &mut da);
                        self.accumulate(a, |gr| gr.iter_mut().zip(&da).for_each(|(x, d)| *x += d));
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T . G
                        let va = self.nodes[a].value.data().to_vec();
                        let mut db = vec![0.0; k * n];
                        dgemm(k, m, n, 1.0, &va, 1, k as isize, &g, n as isize, 1, 0.0, &mut db);
                        self.accumulate(b, |gr| gr.iter_mut().zip(&db).for_each(|(x, d)| *x += d));
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(id, x, w, b, stride, pad);
                }
                Op::MaxPool2d { x, k, stride } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let xs = self.nodes[x].value.shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let os = self.nodes[id].value.shape().to_vec();
                    let (ho, wo) = (os[2], os[3]);
                    let data = self.nodes[x].value.data().to_vec();
                    let mut dx = vec![0.0; data.len()];
                    for img in 0..n {
                        for ci in 0..c {
                            let plane = &data[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                            let base = (img * c + ci) * ho * wo;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut arg = 0usize;
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                                            if plane[idx] > best {
                                                best = plane[idx];
                                                arg = idx;
                                            }
                                        }
                                    }
                                    dx[(img * c + ci) * h * w + arg] += g[base + oy * wo + ox];
                                }
                            }
                        }
                    }
                    self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                Op::Softmax { x, axis, temp } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let y = self.nodes[id].value.data().to_vec();
                    let shape = self.nodes[id].value.shape().to_vec();
                    let (outer, len, inner) = lanes(&shape, axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot) / temp;
                            }
                        }
                    }
                    self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                Op::LogSoftmax { x, axis, temp } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let y = self.nodes[id].value.data().to_vec();
                    let shape = self.nodes[id].value.shape().to_vec();
                    let (outer, len, inner) = lanes(&shape, axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut gsum = 0.0;
                            for j in 0..len {
                                gsum += g[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = (g[at(j)] - y[at(j)].exp() * gsum) / temp;
                            }
                        }
                    }
                    self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                Op::SumAll(x) => {
                    let g = self.nodes[id].grad.clone().unwrap()[0];
                    self.accumulate(x, |gr| gr.iter_mut().for_each(|a| *a += g));
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x].value.numel().max(1) as f64;
                    let g = self.nodes[id].grad.clone().unwrap()[0] / n;
                    self.accumulate(x, |gr| gr.iter_mut().for_each(|a| *a += g));
                }
                Op::SumAxis { x, axis } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let shape = self.nodes[x].value.shape().to_vec();
                    let (outer, len, inner) = lanes(&shape, axis);
                    self.accumulate(x, |gr| {
                        for o in 0..outer {
                            for j in 0..len {
                                let dst = (o * len + j) * inner;
                                let src = o * inner;
                                for i in 0..inner {
                                    gr[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    self.accumulate(x, |gr| gr.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                }
                Op::Permute { x, perm } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let in_shape = self.nodes[x].value.shape().to_vec();
                    let in_strides = strides_for(&in_shape);
                    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let zeros = vec![0usize; out_shape.len()];
                    let mut dx = vec![0.0; self.nodes[x].value.numel()];
                    for_each_broadcast(&out_shape, &mapped, &zeros, |o, ia, _| {
                        dx[ia] += g[o];
                    });
                    self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                Op::Concat { xs, axis } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let out_block = out_shape[axis] * inner;
                    let mut offset = 0;
                    for &xi in &xs {
                        let len = self.nodes[xi].value.shape()[axis];
                        let block = len * inner;
                        let off = offset;
                        self.accumulate(xi, |gr| {
                            for o in 0..outer {
                                let src = o * out_block + off;
                                gr[o * block..(o + 1) * block]
                                    .iter_mut()
                                    .zip(&g[src..src + block])
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                        offset += block;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let shape = self.nodes[x].value.shape().to_vec();
                    let (outer, alen, inner) = lanes(&shape, axis);
                    self.accumulate(x, |gr| {
                        for o in 0..outer {
                            let dst = (o * alen + start) * inner;
                            gr[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[o * len * inner..(o + 1) * len * inner])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::GatherRows { x, rows } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let c = self.nodes[x].value.shape()[1];
                    self.accumulate(x, |gr| {
                        for (k, &i) in rows.iter().enumerate() {
                            gr[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g[k * c..(k + 1) * c])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::GatherRowCol { x, cols } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let c = self.nodes[x].value.shape()[1];
                    self.accumulate(x, |gr| {
                        for (i, &j) in cols.iter().enumerate() {
                            gr[i * c + j] += g[i];
                        }
                    });
                }
                Op::GatherPixels { x, coords } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let s = self.nodes[x].value.shape().to_vec();
                    let (c, h, w) = (s[1], s[2], s[3]);
                    self.accumulate(x, |gr| {
                        for (p, &(ni, yi, xi)) in coords.iter().enumerate() {
                            for ci in 0..c {
                                gr[((ni * c + ci) * h + yi) * w + xi] += g[p * c + ci];
                            }
                        }
                    });
                }
                Op::ResizeBilinear(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let os = self.nodes[id].value.shape().to_vec();
                    let is = self.nodes[x].value.shape().to_vec();
                    let (n, c, oh, ow) = (os[0], os[1], os[2], os[3]);
                    let (h, w) = (is[2], is[3]);
                    let mut dx = vec![0.0; self.nodes[x].value.numel()];
                    for img in 0..n {
                        for ci in 0..c {
                            let pbase = (img * c + ci) * h * w;
                            let base = (img * c + ci) * oh * ow;
                            for oy in 0..oh {
                                let (y0, y1, fy) = resample_coord(oy, oh, h);
                                for ox in 0..ow {
                                    let (x0, x1, fx) = resample_coord(ox, ow, w);
                                    let gv = g[base + oy * ow + ox];
                                    dx[pbase + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                    dx[pbase + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                    dx[pbase + y1 * w + x0] += gv * fy * (1.0 - fx);
                                    dx[pbase + y1 * w + x1] += gv * fy * fx;
                                }
                            }
                        }
                    }
                    self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                Op::GlobalAvgPool(x) => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let s = self.nodes[x].value.shape().to_vec();
                    let hw = (s[2] * s[3]) as f64;
                    let plane = s[2] * s[3];
                    self.accumulate(x, |gr| {
                        for (i, gv) in g.iter().enumerate() {
                            let d = gv / hw;
                            gr[i * plane..(i + 1) * plane].iter_mut().for_each(|a| *a += d);
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Gradient of a broadcast add/sub/mul toward one operand; `scale_by`
    /// is the other operand for the product rule.
    fn backprop_broadcast(&mut self, out: NodeId, x: NodeId, g: &[f64], scale_by: Option<NodeId>) {
        if !self.nodes[x].requires_grad {
            return;
        }
        let out_shape = self.nodes[out].value.shape().to_vec();
        let x_shape = self.nodes[x].value.shape().to_vec();
        if x_shape == out_shape && scale_by.is_none() {
            self.accumulate(x, |gr| gr.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            return;
        }
        let sx = broadcast_strides(&x_shape, &out_shape);
        let mut dx = vec![0.0; self.nodes[x].value.numel()];
        match scale_by {
            None => {
                let zeros = vec![0usize; out_shape.len()];
                for_each_broadcast(&out_shape, &sx, &zeros, |o, ix, _| {
                    dx[ix] += g[o];
                });
            }
            Some(other) => {
                let so = broadcast_strides(self.nodes[other].value.shape(), &out_shape);
                let vo = self.nodes[other].value.data().to_vec();
                for_each_broadcast(&out_shape, &sx, &so, |o, ix, io| {
                    dx[ix] += g[o] * vo[io];
                });
            }
        }
        self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
    }

    fn conv2d_backward(&mut self, out: NodeId, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) {
        let g = self.nodes[out].grad.clone().unwrap();
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let os = self.nodes[out].value.shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (os[2], os[3]);
        let ckk = c * kh * kw;
        let owo = ho * wo;

        if let Some(bb) = b {
            if self.nodes[bb].requires_grad {
                let mut db = vec![0.0; f];
                for img in 0..n {
                    for fi in 0..f {
                        let base = (img * f + fi) * owo;
                        db[fi] += g[base..base + owo].iter().sum::<f64>();
                    }
                }
                self.accumulate(bb, |gr| gr.iter_mut().zip(&db).for_each(|(a, d)| *a += d));
            }
        }

        let need_w = self.nodes[w].requires_grad;
        let need_x = self.nodes[x].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let xv = self.nodes[x].value.data().to_vec();
        let wv = self.nodes[w].value.data().to_vec();
        let mut dw = vec![0.0; f * ckk];
        let mut dx = vec![0.0; xv.len()];
        let mut cols = vec![0.0; ckk * owo];
        let mut dcols = vec![0.0; ckk * owo];
        for img in 0..n {
            let gi = &g[img * f * owo..(img + 1) * f * owo];
            if need_w {
                im2col(
                    &xv[img * c * h * wd..(img + 1) * c * h * wd],
                    c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols,
                );
                // dW += G . cols^T
                dgemm(f, owo, ckk, 1.0, gi, owo as isize, 1, &cols, 1, owo as isize, 1.0, &mut dw);
            }
            if need_x {
                // dcols = W^T . G, then scatter back through the patches
                dgemm(ckk, f, owo, 1.0, &wv, 1, ckk as isize, gi, owo as isize, 1, 0.0, &mut dcols);
                col2im_add(
                    &dcols,
                    c, h, wd, kh, kw, stride, pad, ho, wo,
                    &mut dx[img * c * h * wd..(img + 1) * c * h * wd],
                );
            }
        }
        if need_w {
            self.accumulate(w, |gr| gr.iter_mut().zip(&dw).for_each(|(a, d)| *a += d));
        }
        if need_x {
            self.accumulate(x, |gr| gr.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
        }
    }
}

/// Half-pixel resampling: source coords and interpolation weight for an
/// output index under `out -> in` scaling.
fn resample_coord(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Max relative error between analytic and central-difference gradients of
/// a scalar loss over every element of `x`.
///
/// The builder runs on a fresh graph per evaluation; the analytic gradient
/// of an unused input counts as zero.
pub fn grad_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64, Error>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, Error>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let id = g.param(x.clone());
    let loss = build(&mut g, id)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check loss must be scalar, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(id) {
        Some(grad) => grad.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |t: &Tensor| -> Result<f64, Error> {
        let mut g = Graph::new();
        let id = g.param(t.clone());
        let loss = build(&mut g, id)?;
        Ok(g.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_hand_value() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_slice(&[2, 1], &[1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv2d_scalar_product() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[1, 1, 1, 1], &[3.0]).unwrap());
        let w = g.constant(Tensor::from_slice(&[1, 1, 1, 1], &[2.0]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[1, 2], &[0.0, 0.0]).unwrap());
        let y = g.softmax(x, 1, 2.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut rng = Rng::seeded(1);
        for _ in 0..20 {
            let t = rand_tensor(&mut rng, &[4, 7]);
            let temp = rng.range_f64(0.1, 5.0);
            let mut g = Graph::new();
            let x = g.constant(t);
            let y = g.softmax(x, 1, temp).unwrap();
            for row in g.value(y).data().chunks(7) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn gradient_reversal_contract() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let r = g.gradient_reversal(x, 1.0).unwrap();
        assert_eq!(g.value(r).item(), 3.0);
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let r = g.gradient_reversal(x, 0.5).unwrap();
        let y = g.scale(r, 2.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-1.0]);
    }

    #[test]
    fn gradient_reversal_beta_zero_kills_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice(&[3], &[0.3, -0.2, 0.9]).unwrap());
        let r = g.gradient_reversal(x, 0.0).unwrap();
        let s = g.square(r);
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(
            |g, id| {
                let y = g.square(id);
                Ok(g.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "x^2 grad err {err}");

        // constant loss: analytic 0, error 0
        let err = grad_check(|g, _| Ok(g.constant_scalar(5.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_softmax_cross_entropy_closed_form() {
        // uniform logits, K=2, target 0: grad = p - y = (-0.5, 0.5)
        let x = Tensor::from_slice(&[1, 2], &[0.0, 0.0]).unwrap();
        let build = |g: &mut Graph, id: NodeId| {
            let ls = g.log_softmax(id, 1, 1.0)?;
            let picked = g.gather_row_col(ls, &[0])?;
            let s = g.sum_all(picked);
            Ok(g.neg(s))
        };
        let mut g = Graph::new();
        let id = g.param(x.clone());
        let loss = build(&mut g, id).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(id).unwrap();
        assert!((grad[0] + 0.5).abs() < 1e-12 && (grad[1] - 0.5).abs() < 1e-12);
        let err = grad_check(build, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "softmax-CE grad err {err}");
    }

    // every op against central differences on random tensors
    #[test]
    fn grad_check_all_ops() {
        let results = gradcheck_suite(None, 8).unwrap();
        assert!(results.len() >= 18, "suite must cover the op families");
        for (name, err) in results {
            assert!(err < 1e-4, "{name}: grad err {err}");
        }
        assert!(gradcheck_suite(Some("no_such_op"), 1).unwrap().is_empty());
        let one = gradcheck_suite(Some("conv2d"), 2).unwrap();
        assert_eq!(one.len(), 1);
    }
}

/// Finite-difference check of every op family on random tensors; returns
/// `(op name, worst relative error over trials)`. `filter` restricts the
/// run to ops whose name contains the needle. Backs both the unit test
/// and the `gradcheck` CLI command.
pub fn gradcheck_suite(filter: Option<&str>, trials: usize) -> Result<Vec<(String, f64)>, Error> {
    use crate::rng::Rng;
    let mut rng = Rng::stream(42, "gradcheck");
    let rand_tensor = |rng: &mut Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect())
            .expect("shape product")
    };
    {
        type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId, Error>>);
        let cases: Vec<Case> = vec![
            ("relu", vec![3, 4], Box::new(|g, x| {
                // keep away from the kink at 0
                let y = g.add_scalar(x, 2.0);
                let r = g.relu(y);
                Ok(g.sum_all(r))
            })),
            ("sigmoid", vec![5], Box::new(|g, x| {
                let y = g.sigmoid(x);
                let s = g.square(y);
                Ok(g.sum_all(s))
            })),
            ("exp_log", vec![4], Box::new(|g, x| {
                let e = g.exp(x);
                let l = g.log(e);
                let m = g.mul(l, e)?;
                Ok(g.sum_all(m))
            })),
            ("sqrt", vec![4], Box::new(|g, x| {
                let y = g.add_scalar(x, 3.0);
                let r = g.sqrt(y);
                Ok(g.sum_all(r))
            })),
            ("div_broadcast", vec![3, 4], Box::new(|g, x| {
                let c = g.constant(Tensor::from_slice(&[4], &[1.5, 2.0, -3.0, 0.7]).unwrap());
                let y = g.div(x, c)?;
                let sq = g.square(y);
                Ok(g.sum_all(sq))
            })),
            ("mul_broadcast", vec![2, 3], Box::new(|g, x| {
                let c = g.constant(Tensor::from_slice(&[2, 1], &[0.5, -1.5]).unwrap());
                let y = g.mul(x, c)?;
                Ok(g.sum_all(y))
            })),
            ("matmul", vec![3, 4], Box::new(|g, x| {
                let w = g.constant(Tensor::from_slice(&[4, 2], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap());
                let y = g.matmul(x, w)?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            })),
            ("conv2d", vec![2, 2, 5, 5], Box::new(|g, x| {
                let mut r = Rng::seeded(7);
                let wt = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| r.range_f64(-0.5, 0.5)).collect()).unwrap();
                let bt = Tensor::from_slice(&[3], &[0.1, -0.2, 0.05]).unwrap();
                let w = g.param(wt);
                let b = g.param(bt);
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            })),
            ("maxpool", vec![1, 2, 4, 4], Box::new(|g, x| {
                let y = g.max_pool2d(x, 2, 2)?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            })),
            ("softmax_t", vec![3, 5], Box::new(|g, x| {
                let y = g.softmax(x, 1, 2.0)?;
                let sq = g.square(y);
                Ok(g.sum_all(sq))
            })),
            ("log_softmax", vec![2, 4], Box::new(|g, x| {
                let y = g.log_softmax(x, 1, 0.7)?;
                let p = g.gather_row_col(y, &[1, 3])?;
                let s = g.sum_all(p);
                Ok(g.neg(s))
            })),
            ("reductions", vec![3, 4], Box::new(|g, x| {
                let s0 = g.sum_axis(x, 0)?;
                let sq = g.square(s0);
                let m = g.mean_all(sq);
                let t = g.sum_all(x);
                let u = g.mul(m, t)?;
                Ok(g.sum_all(u))
            })),
            ("shape_ops", vec![2, 3, 4], Box::new(|g, x| {
                let p = g.permute(x, &[2, 0, 1])?;
                let r = g.reshape(p, vec![4, 6])?;
                let a = g.slice(r, 0, 1, 2)?;
                let b = g.slice(r, 0, 0, 2)?;
                let cat = g.concat(&[a, b], 1)?;
                let s = g.square(cat);
                Ok(g.sum_all(s))
            })),
            ("gathers", vec![4, 3], Box::new(|g, x| {
                let rows = g.gather_rows(x, &[2, 0, 2])?;
                let picked = g.gather_row_col(rows, &[1, 0, 2])?;
                let s = g.square(picked);
                Ok(g.sum_all(s))
            })),
            ("gather_pixels", vec![2, 3, 2, 2], Box::new(|g, x| {
                let px = g.gather_pixels(x, &[(0, 1, 0), (1, 0, 1), (0, 1, 0)])?;
                let sq = g.square(px);
                Ok(g.sum_all(sq))
            })),
            ("resize", vec![1, 2, 3, 3], Box::new(|g, x| {
                let y = g.resize_bilinear(x, 5, 7)?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            })),
            ("gap", vec![2, 3, 4, 4], Box::new(|g, x| {
                let y = g.global_avg_pool(x)?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            })),
            ("smooth_l1", vec![6], Box::new(|g, x| {
                // scale into the quadratic zone, away from |x| = 1
                let y = g.scale(x, 0.45);
                let s = g.smooth_l1(y);
                Ok(g.sum_all(s))
            })),
            ("l2_norm", vec![5], Box::new(|g, x| {
                let y = g.add_scalar(x, 2.0);
                Ok(g.l2_norm(y))
            })),
        ];
        let mut out = Vec::new();
        for (name, shape, build) in &cases {
            if let Some(needle) = filter {
                if !name.contains(needle) {
                    continue;
                }
            }
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let t = rand_tensor(&mut rng, shape);
                worst = worst.max(grad_check(build, &t, 1e-5)?);
            }
            out.push((name.to_string(), worst));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod suite_tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 3]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn forward_determinism() {
        let mut rng = Rng::seeded(9);
        let t = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let run = || {
            let mut g = Graph::new();
            let x = g.param(t.clone());
            let wt = g.param(w.clone());
            let c = g.conv2d(x, wt, None, 1, 1).unwrap();
            let r = g.relu(c);
            let s = g.square(r);
            let loss = g.mean_all(s);
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad(x).unwrap().to_vec(), g.grad(wt).unwrap().to_vec())
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn finite_outputs_on_random_inputs() {
        let mut rng = Rng::seeded(17);
        for _ in 0..50 {
            let t = rand_tensor(&mut rng, &[2, 2, 4, 4]);
            let mut g = Graph::new();
            let x = g.constant(t);
            let a = g.sigmoid(x);
            let b = g.clamp(a, 1e-7, 1.0 - 1e-7);
            let c = g.log(b);
            let d = g.exp(c);
            let s = g.softmax(d, 1, 0.5).unwrap();
            let m = g.mean_all(s);
            assert!(g.value(m).is_finite());
        }
    }
}
