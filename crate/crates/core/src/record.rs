//! Reverse-mode gradients over a small fixed set of primitives.
//!
//! A [`Record`] is an append-only list of primitive operations. Every node
//! stores its forward value; [`Record::backward`] walks the list in reverse
//! and accumulates adjoints into a flat parameter-gradient vector. Parameter
//! leaves are slices of one flat parameter vector, addressed by offset, so
//! gradients come back in exactly the layout the parameters came in.
//!
//! Batched evaluation is one record over a leading batch dimension.
//!
//! ```
//! use genagg_core::record::value_and_grad;
//!
//! // f(θ) = θ²
//! let (loss, grad) = value_and_grad(&[3.0], |rec, p| {
//!     let theta = rec.param(p, 0, vec![1])?;
//!     let sq = rec.mul(theta, theta)?;
//!     rec.sum(sq)
//! })
//! .unwrap();
//! assert_eq!((loss, grad[0]), (9.0, 6.0));
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{axpy, matmul_acc, transpose, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { offset: usize },
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv1d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Relu(NodeId),
    Gelu(NodeId),
    /// Keeps σ(x) for the backward pass.
    Silu { x: NodeId, sig: Vec<f64> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddChannel { x: NodeId, e: NodeId },
    Reshape(NodeId),
    Concat(NodeId, NodeId),
    Upsample1d(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    Mean(NodeId),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Silu { .. } => "silu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannel { .. } => "add_channel",
            Op::Reshape(_) => "reshape",
            Op::Concat(..) => "concat",
            Op::Upsample1d(_) => "upsample1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct Record {
    nodes: Vec<Node>,
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < k {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// A trainable leaf holding `params[offset..offset + prod(shape)]`.
    pub fn param(&mut self, params: &[f64], offset: usize, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if offset + n > params.len() {
            return Err(Error::Layout(format!(
                "parameter slice {}..{} exceeds vector of length {}",
                offset,
                offset + n,
                params.len()
            )));
        }
        let t = Tensor::new(shape, params[offset..offset + n].to_vec())?;
        Ok(self.push(Op::Param { offset }, t, true))
    }

    /// `x [N, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("affine", format!("x {:?} w {:?}", xs, ws)));
        }
        let (n, out) = (xs[0], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("affine", format!("bias {:?}", self.shape(b))));
            }
        }
        let inp = xs[1];
        let wt = transpose(self.value(w).data(), out, inp);
        let mut y = vec![0.0; n * out];
        matmul_acc(self.value(x).data(), &wt, &mut y, n, inp, out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for yr in y.chunks_mut(out) {
                for (yo, bo) in yr.iter_mut().zip(bv) {
                    *yo += bo;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, out], y)?;
        Ok(self.push(Op::Affine { x, w, b }, t, needs))
    }

    /// 1-D convolution: `x [N, C, L]`, `w [O, C, K]`, `b [O]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::shape("conv1d", format!("x {:?} w {:?}", xs, ws)));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        let lo = conv_out(l, k, stride, pad)
            .ok_or_else(|| Error::shape("conv1d", format!("length {} kernel {}", l, k)))?;
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv1d", format!("bias {:?}", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut y = vec![0.0; n * o * lo];
        for ni in 0..n {
            for oi in 0..o {
                let yrow = &mut y[(ni * o + oi) * lo..(ni * o + oi + 1) * lo];
                if let Some(bv) = bv {
                    yrow.iter_mut().for_each(|v| *v = bv[oi]);
                }
                for ci in 0..c {
                    let xrow = &xv[(ni * c + ci) * l..(ni * c + ci + 1) * l];
                    let wrow = &wv[(oi * c + ci) * k..(oi * c + ci + 1) * k];
                    for (j, yj) in yrow.iter_mut().enumerate() {
                        let base = (j * stride) as isize - pad as isize;
                        for (ki, wk) in wrow.iter().enumerate() {
                            let pos = base + ki as isize;
                            if pos >= 0 && (pos as usize) < l {
                                *yj += wk * xrow[pos as usize];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, o, lo], y)?;
        Ok(self.push(Op::Conv1d { x, w, b, stride, pad }, t, needs))
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [O, C, KH, KW]`, `b [O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("x {:?} w {:?}", xs, ws)));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out(h, kh, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("height {} kernel {}", h, kh)))?;
        let wo = conv_out(wd, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("width {} kernel {}", wd, kw)))?;
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut y = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let ybase = (ni * o + oi) * ho * wo;
                if let Some(bv) = bv {
                    y[ybase..ybase + ho * wo].iter_mut().for_each(|v| *v = bv[oi]);
                }
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * wd;
                    let wbase = (oi * c + ci) * kh * kw;
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for a in 0..kh {
                                let r = (i * stride + a) as isize - pad as isize;
                                if r < 0 || r as usize >= h {
                                    continue;
                                }
                                for bb in 0..kw {
                                    let col = (j * stride + bb) as isize - pad as isize;
                                    if col < 0 || col as usize >= wd {
                                        continue;
                                    }
                                    acc += wv[wbase + a * kw + bb]
                                        * xv[xbase + r as usize * wd + col as usize];
                                }
                            }
                            y[ybase + i * wo + j] += acc;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, o, ho, wo], y)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, t, needs))
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("elementwise map preserves shape");
        let needs = self.needs(x);
        self.push(op, t, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let sig: Vec<f64> = self.value(x).data().iter().map(|&a| sigmoid(a)).collect();
        let v = self.value(x);
        let y = v.data().iter().zip(&sig).map(|(a, s)| a * s).collect();
        let t = Tensor::new(v.shape().to_vec(), y).expect("elementwise map preserves shape");
        let needs = self.needs(x);
        self.push(Op::Silu { x, sig }, t, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, t, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x [N, C, ...] + e [N, C]`, broadcasting `e` over trailing axes.
    pub fn add_channel(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let (xs, es) = (self.shape(x), self.shape(e));
        if xs.len() < 2 || es.len() != 2 || xs[0] != es[0] || xs[1] != es[1] {
            return Err(Error::shape("add_channel", format!("x {:?} e {:?}", xs, es)));
        }
        let inner: usize = xs[2..].iter().product();
        let mut y = self.value(x).clone();
        let ev = self.value(e).data();
        for (chunk, ec) in y.data_mut().chunks_mut(inner).zip(ev) {
            chunk.iter_mut().for_each(|v| *v += ec);
        }
        let needs = self.needs(x) || self.needs(e);
        Ok(self.push(Op::AddChannel { x, e }, y, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), t, needs))
    }

    /// Concatenation along axis 1; all other axes must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", as_, bs)));
        }
        let inner: usize = as_[2..].iter().product();
        let (ca, cb) = (as_[1] * inner, bs[1] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..as_[0] {
            data.extend_from_slice(&av[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&bv[n * cb..(n + 1) * cb]);
        }
        let mut shape = as_.clone();
        shape[1] += bs[1];
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat(a, b), t, needs))
    }

    /// Nearest-neighbour ×2 upsampling of the last axis of `[N, C, L]`.
    pub fn upsample1d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("upsample1d", format!("{:?}", xs)));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| [v, v])
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1], xs[2] * 2], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Upsample1d(x), t, needs))
    }

    /// Normalization over the last axis with affine `gamma`, `beta` of that size.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("x {:?}", xs)));
        }
        let mut y = self.value(x).clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for row in y.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[i] + b[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, y, needs))
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", ls, labels.len()),
            ));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (row, &y) in lv.rows().zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let t = Tensor::scalar(total / labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            t,
            needs,
        ))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        let needs = self.needs(x);
        Ok(self.push(Op::Mean(x), t, needs))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        let needs = self.needs(x);
        Ok(self.push(Op::Sum(x), t, needs))
    }

    /// Index of the first node whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    /// Gradient of the scalar node `loss` with respect to every parameter
    /// leaf, scattered into a vector of length `n_params`.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Vec<f64>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut out = vec![0.0; n_params];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    let dst = out.get_mut(*offset..*offset + g.len()).ok_or_else(|| {
                        Error::Layout(format!("gradient slice at {} exceeds {}", offset, n_params))
                    })?;
                    axpy(1.0, &g, dst);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                    let out_dim = wv.shape()[0];
                    if self.needs(*x) {
                        let gx = acc(&mut grads, *x, n * inp);
                        matmul_acc(&g, wv.data(), gx, n, out_dim, inp);
                    }
                    if self.needs(*w) {
                        let gt = transpose(&g, n, out_dim);
                        let gw = acc(&mut grads, *w, out_dim * inp);
                        matmul_acc(&gt, xv.data(), gw, out_dim, n, inp);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let gb = acc(&mut grads, *b, out_dim);
                            for row in g.chunks(out_dim) {
                                axpy(1.0, row, gb);
                            }
                        }
                    }
                }
                Op::Conv1d { x, w, b, stride, pad } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (n, c, l) = (xs[0], xs[1], xs[2]);
                    let (o, k) = (ws[0], ws[2]);
                    let lo = node.value.shape()[2];
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let need_x = self.needs(*x);
                    let need_w = self.needs(*w);
                    let mut gx = if need_x { vec![0.0; n * c * l] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; o * c * k] } else { Vec::new() };
                    for ni in 0..n {
                        for oi in 0..o {
                            let grow = &g[(ni * o + oi) * lo..(ni * o + oi + 1) * lo];
                            for ci in 0..c {
                                let xoff = (ni * c + ci) * l;
                                let woff = (oi * c + ci) * k;
                                for (j, &gy) in grow.iter().enumerate() {
                                    if gy == 0.0 {
                                        continue;
                                    }
                                    let base = (j * stride) as isize - *pad as isize;
                                    for ki in 0..k {
                                        let pos = base + ki as isize;
                                        if pos < 0 || pos as usize >= l {
                                            continue;
                                        }
                                        let p = xoff + pos as usize;
                                        if need_x {
                                            gx[p] += gy * wv[woff + ki];
                                        }
                                        if need_w {
                                            gw[woff + ki] += gy * xv[p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        axpy(1.0, &gx, acc(&mut grads, *x, gx.len()));
                    }
                    if need_w {
                        axpy(1.0, &gw, acc(&mut grads, *w, gw.len()));
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let gb = acc(&mut grads, *b, o);
                            for (idx, row) in g.chunks(lo).enumerate() {
                                gb[idx % o] += row.iter().sum::<f64>();
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (xs, ws) = (self.shape(*x), self.shape(*w));
                    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let need_x = self.needs(*x);
                    let need_w = self.needs(*w);
                    let mut gx = if need_x { vec![0.0; n * c * h * wd] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; o * c * kh * kw] } else { Vec::new() };
                    for ni in 0..n {
                        for oi in 0..o {
                            let gbase = (ni * o + oi) * ho * wo;
                            for ci in 0..c {
                                let xbase = (ni * c + ci) * h * wd;
                                let wbase = (oi * c + ci) * kh * kw;
                                for i in 0..ho {
                                    for j in 0..wo {
                                        let gy = g[gbase + i * wo + j];
                                        if gy == 0.0 {
                                            continue;
                                        }
                                        for a in 0..kh {
                                            let r = (i * stride + a) as isize - *pad as isize;
                                            if r < 0 || r as usize >= h {
                                                continue;
                                            }
                                            for bb in 0..kw {
                                                let col =
                                                    (j * stride + bb) as isize - *pad as isize;
                                                if col < 0 || col as usize >= wd {
                                                    continue;
                                                }
                                                let p = xbase + r as usize * wd + col as usize;
                                                let q = wbase + a * kw + bb;
                                                if need_x {
                                                    gx[p] += gy * wv[q];
                                                }
                                                if need_w {
                                                    gw[q] += gy * xv[p];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        axpy(1.0, &gx, acc(&mut grads, *x, gx.len()));
                    }
                    if need_w {
                        axpy(1.0, &gw, acc(&mut grads, *w, gw.len()));
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let gb = acc(&mut grads, *b, o);
                            for (idx, plane) in g.chunks(ho * wo).enumerate() {
                                gb[idx % o] += plane.iter().sum::<f64>();
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((gi, gy), xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if *xi > 0.0 {
                            *gi += gy;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, g.len());
                    for ((gi, gy), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *gi += gy * gelu_grad(xi);
                    }
                }
                Op::Silu { x, sig } => {
                    let xv = self.value(*x).data();
                    let gx = acc(&mut grads, *x, g.len());
                    for (((gi, gy), &xi), &s) in gx.iter_mut().zip(&g).zip(xv).zip(sig) {
                        *gi += gy * s * (1.0 + xi * (1.0 - s));
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        if self.needs(id) {
                            axpy(1.0, &g, acc(&mut grads, id, g.len()));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        axpy(1.0, &g, acc(&mut grads, *a, g.len()));
                    }
                    if self.needs(*b) {
                        axpy(-1.0, &g, acc(&mut grads, *b, g.len()));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.needs(*a) {
                        let ga = acc(&mut grads, *a, g.len());
                        for ((gi, gy), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *gi += gy * y;
                        }
                    }
                    if self.needs(*b) {
                        let gb = acc(&mut grads, *b, g.len());
                        for ((gi, gy), x) in gb.iter_mut().zip(&g).zip(av) {
                            *gi += gy * x;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    axpy(*c, &g, acc(&mut grads, *x, g.len()));
                }
                Op::AddChannel { x, e } => {
                    if self.needs(*x) {
                        axpy(1.0, &g, acc(&mut grads, *x, g.len()));
                    }
                    if self.needs(*e) {
                        let ne = self.value(*e).len();
                        let inner = g.len() / ne;
                        let ge = acc(&mut grads, *e, ne);
                        for (gi, chunk) in ge.iter_mut().zip(g.chunks(inner)) {
                            *gi += chunk.iter().sum::<f64>();
                        }
                    }
                }
                Op::Reshape(x) => {
                    axpy(1.0, &g, acc(&mut grads, *x, g.len()));
                }
                Op::Concat(a, b) => {
                    let (as_, bs) = (self.shape(*a), self.shape(*b));
                    let n = as_[0];
                    let inner: usize = as_[2..].iter().product();
                    let (ca, cb) = (as_[1] * inner, bs[1] * inner);
                    if self.needs(*a) {
                        let ga = acc(&mut grads, *a, n * ca);
                        for r in 0..n {
                            let src = &g[r * (ca + cb)..r * (ca + cb) + ca];
                            axpy(1.0, src, &mut ga[r * ca..(r + 1) * ca]);
                        }
                    }
                    if self.needs(*b) {
                        let gb = acc(&mut grads, *b, n * cb);
                        for r in 0..n {
                            let src = &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                            axpy(1.0, src, &mut gb[r * cb..(r + 1) * cb]);
                        }
                    }
                }
                Op::Upsample1d(x) => {
                    let gx = acc(&mut grads, *x, g.len() / 2);
                    for (gi, pair) in gx.iter_mut().zip(g.chunks(2)) {
                        *gi += pair[0] + pair[1];
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let d = self.value(*gamma).len();
                    let xv = self.value(*x).data();
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![0.0; xv.len()];
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for (r, row) in xv.chunks(d).enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / libm::sqrt(var + LN_EPS);
                        for i in 0..d {
                            xhat[i] = (row[i] - mean) * inv;
                            dxhat[i] = gy[i] * gam[i];
                            gg[i] += gy[i] * xhat[i];
                            gb[i] += gy[i];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            gx[r * d + i] =
                                inv / d as f64 * (d as f64 * dxhat[i] - s1 - xhat[i] * s2);
                        }
                    }
                    if self.needs(*x) {
                        axpy(1.0, &gx, acc(&mut grads, *x, gx.len()));
                    }
                    if self.needs(*gamma) {
                        axpy(1.0, &gg, acc(&mut grads, *gamma, d));
                    }
                    if self.needs(*beta) {
                        axpy(1.0, &gb, acc(&mut grads, *beta, d));
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let k = lv.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    let gl = acc(&mut grads, *logits, lv.len());
                    for (r, (row, &y)) in lv.rows().zip(labels.iter()).enumerate() {
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = libm::exp(row[j] - lse);
                            let t = if j == y { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (p - t);
                        }
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    let v = g[0] / n as f64;
                    gx.iter_mut().for_each(|a| *a += v);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let gx = acc(&mut grads, *x, n);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

/// Builds a record with `build`, then returns the scalar loss and its
/// gradient with respect to `params`.
///
/// A non-finite loss is reported with the index of the first operation that
/// produced a non-finite value.
pub fn value_and_grad<F>(params: &[f64], build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Record, &[f64]) -> Result<NodeId>,
{
    let mut rec = Record::new();
    let loss = build(&mut rec, params)?;
    let value = rec.value(loss);
    if value.len() != 1 {
        return Err(Error::shape("value_and_grad", format!("loss shape {:?}", value.shape())));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        let (op_index, op) = rec.first_non_finite().unwrap_or((loss.0, "loss"));
        return Err(Error::NonFinite { op_index, op });
    }
    let grads = rec.backward(loss, params.len())?;
    Ok((v, grads))
}

/// Largest relative disagreement between the recorded gradient and a
/// central finite difference with step `h`, over every parameter.
///
/// The relative error of one entry is `|g − fd| / max(|g|, |fd|, 1)`.
pub fn gradient_check<F>(params: &[f64], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Record, &[f64]) -> Result<NodeId>,
{
    let (_, grads) = value_and_grad(params, &build)?;
    let eval = |p: &[f64]| -> Result<f64> {
        let mut rec = Record::new();
        let out = build(&mut rec, p)?;
        Ok(rec.value(out).data()[0])
    };
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = eval(&p)?;
        p[i] = orig - h;
        let down = eval(&p)?;
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = grads[i];
        let rel = libm::fabs(g - fd) / g.abs().max(fd.abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let (v, g) = value_and_grad(&[3.0], |rec, p| {
            let t = rec.param(p, 0, vec![1])?;
            let sq = rec.mul(t, t)?;
            rec.sum(sq)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (v, g) = value_and_grad(&[1.0, -2.0, 0.5], |rec, p| {
            let _unused = rec.param(p, 0, vec![3])?;
            let c = rec.input(Tensor::scalar(4.2));
            rec.sum(c)
        })
        .unwrap();
        assert_eq!(v, 4.2);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_reports_op_index() {
        let err = value_and_grad(&[1e308, 1e308], |rec, p| {
            let t = rec.param(p, 0, vec![2])?;
            let big = rec.scale(t, 10.0);
            rec.sum(big)
        })
        .unwrap_err();
        assert_eq!(err, Error::NonFinite { op_index: 1, op: "scale" });
    }

    #[test]
    fn shape_errors() {
        let mut rec = Record::new();
        let a = rec.input(Tensor::zeros(vec![2, 3]));
        let b = rec.input(Tensor::zeros(vec![3, 2]));
        assert!(rec.add(a, b).is_err());
        assert!(rec.affine(a, a, None).is_ok());
        let w = rec.input(Tensor::zeros(vec![4, 2]));
        assert!(rec.affine(a, w, None).is_err());
        assert!(rec.softmax_cross_entropy(a, &[0, 5]).is_err());
        assert!(rec.param(&[0.0; 3], 2, vec![2]).is_err());
    }
}
