//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! tape in reverse, so gradients of a node are complete before it is
//! visited. All reductions run in a fixed row-major order, which makes both
//! passes bit-deterministic.

use crate::error::{dim_err, LctrError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, alpha: f64 },
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Sum(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, kernel: Var, padding: usize },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    SplitHeads { x: Var, heads: usize },
    MergeHeads(Var),
    MeanAxis0(Var),
    SliceAxis0 { x: Var, start: usize },
    ConcatAxis0(Var, Var),
    SpatialMul { x: Var, map: Var },
    MinMaxNormalize { x: Var, argmin: usize, argmax: usize, range: f64 },
    WeightedSum { weights: Var, items: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn expect_ndim(op: &str, t: &Tensor, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return dim_err(format!(
            "{op}: expected {ndim}-d input, got shape {:?}",
            t.shape()
        ));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Its gradient is tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_fn(tx.shape(), |i| alpha * tx.data()[i] + beta);
        self.push(out, Op::Affine { x, alpha }, &[x])
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.affine(x, alpha, 0.0)
    }

    /// Broadcasts `bias` over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap();
        if tb.numel() != n {
            return dim_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let b = tb.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + b[i % n]);
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds a per-channel bias to a `C×H×W` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        expect_ndim("add_channel_bias", tx, 3)?;
        let c = tx.shape()[0];
        if tb.numel() != c {
            return dim_err(format!(
                "add_channel_bias: bias {:?} vs map {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let plane = tx.shape()[1] * tx.shape()[2];
        let b = tb.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + b[i / plane]);
        Ok(self.push(out, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `B×m×k` and `B×k×n`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::batch_matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a 2-d or 3-d tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose_last2(self.value(x))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(LctrError::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n || tb.numel() != n {
            return dim_err(format!(
                "layer_norm: gain {:?} / bias {:?} must match last axis of {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            ));
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_fn(tx.shape(), |i| kernels::gelu(tx.data()[i]));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_fn(tx.shape(), |i| kernels::sigmoid(tx.data()[i]));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Stride-1 cross-correlation of a `D×H×W` map with a `D×C×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(kernel), padding)?;
        Ok(self.push(out, Op::Conv2d { x, kernel, padding }, &[x, kernel]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Per-channel maximum; ties resolve to the first row-major position.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::global_max_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    /// `T×D` to `S×T×(D/S)`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let out = kernels::split_heads(self.value(x), heads)?;
        Ok(self.push(out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `S×T×d` to `T×(S·d)`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let out = kernels::merge_heads(self.value(x))?;
        Ok(self.push(out, Op::MergeHeads(x), &[x]))
    }

    /// Mean over the leading axis.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let out = kernels::mean_axis0(self.value(x))?;
        Ok(self.push(out, Op::MeanAxis0(x), &[x]))
    }

    /// Sub-range `start..end` of the leading axis.
    pub fn slice_axis0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let d0 = tx.shape()[0];
        if start >= end || end > d0 {
            return dim_err(format!(
                "slice {start}..{end} out of range for axis of extent {d0}"
            ));
        }
        let stride = tx.numel() / d0;
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let data = tx.data()[start * stride..end * stride].to_vec();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SliceAxis0 { x, start }, &[x]))
    }

    /// Stacks `a` on top of `b` along the leading axis.
    pub fn concat_axis0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != tb.ndim() || ta.shape()[1..] != tb.shape()[1..] {
            return dim_err(format!(
                "concat: trailing shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            ));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::ConcatAxis0(a, b), &[a, b]))
    }

    /// Multiplies every channel of a `D×H×W` map by the `H×W` map.
    pub fn spatial_mul(&mut self, x: Var, map: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(map));
        expect_ndim("spatial_mul", tx, 3)?;
        if tm.shape() != &tx.shape()[1..] {
            return dim_err(format!(
                "spatial_mul: map {:?} does not match spatial extent of {:?}",
                tm.shape(),
                tx.shape()
            ));
        }
        let plane = tm.numel();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] * tm.data()[i % plane]);
        Ok(self.push(out, Op::SpatialMul { x, map }, &[x, map]))
    }

    /// Rescales to `[0, 1]`; a constant input maps to all zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (argmin, argmax) = kernels::argmin_argmax(tx.data());
        let (lo, hi) = (tx.data()[argmin], tx.data()[argmax]);
        let range = hi - lo;
        let out = if range > 0.0 {
            Tensor::from_fn(tx.shape(), |i| (tx.data()[i] - lo) / range)
        } else {
            Tensor::zeros(tx.shape())
        };
        self.push(
            out,
            Op::MinMaxNormalize {
                x,
                argmin,
                argmax,
                range,
            },
            &[x],
        )
    }

    /// `Σ_g weights[g] · items[g]` for `weights: G` and `items: G×…`.
    pub fn weighted_sum(&mut self, weights: Var, items: Var) -> Result<Var> {
        let out = kernels::weighted_sum(self.value(weights), self.value(items))?;
        Ok(self.push(out, Op::WeightedSum { weights, items }, &[weights, items]))
    }

    /// `−log softmax(logits)[label]` as a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        if label >= tl.numel() {
            return Err(LctrError::Usage(format!(
                "label {label} out of range for {} classes",
                tl.numel()
            )));
        }
        let probs = kernels::softmax(&tl.reshaped(&[tl.numel()])?, 0)?.into_data();
        let z = tl.data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a one-element `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(LctrError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
            Some(acc) => add_into(acc, &d),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    send(*a, d);
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    send(*b, d);
                }
            }
            Op::Affine { x, alpha } => send(*x, g.iter().map(|v| v * alpha).collect()),
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*bias) {
                    let n = val(*bias).numel();
                    let mut d = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        d[k % n] += v;
                    }
                    send(*bias, d);
                }
            }
            Op::AddChannelBias { x, bias } => {
                if wants(*x) {
                    send(*x, g.to_vec());
                }
                if wants(*bias) {
                    let c = val(*bias).numel();
                    let plane = g.len() / c;
                    let d = (0..c)
                        .map(|ch| g[ch * plane..(ch + 1) * plane].iter().sum())
                        .collect();
                    send(*bias, d);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    send(*a, kernels::matmul_nt(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    send(*b, kernels::matmul_tn(ta.data(), g, k, m, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if wants(*a) {
                    let mut d = Vec::with_capacity(ta.numel());
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bsl = &tb.data()[s * k * n..(s + 1) * k * n];
                        d.extend(kernels::matmul_nt(gs, bsl, m, n, k));
                    }
                    send(*a, d);
                }
                if wants(*b) {
                    let mut d = Vec::with_capacity(tb.numel());
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let asl = &ta.data()[s * m * k..(s + 1) * m * k];
                        d.extend(kernels::matmul_tn(asl, gs, k, m, n));
                    }
                    send(*b, d);
                }
            }
            Op::Transpose(x) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                send(*x, kernels::transpose_last2(&gt).expect("transpose").into_data());
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * len * inner + r;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gn = val(*gain).data();
                let n = gn.len();
                let rows = g.len() / n;
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gn[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gn[j];
                            d[r * n + j] =
                                rstd[r] * (dh - s1 / n as f64 - hr[j] * s2 / n as f64);
                        }
                    }
                    send(*x, d);
                }
                if wants(*gain) {
                    let mut d = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        d[k % n] += v * xhat[k];
                    }
                    send(*gain, d);
                }
                if wants(*bias) {
                    let mut d = vec![0.0; n];
                    for (k, v) in g.iter().enumerate() {
                        d[k % n] += v;
                    }
                    send(*bias, d);
                }
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| gv * kernels::gelu_grad(*xv))
                    .collect();
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                send(*x, d);
            }
            Op::Conv2d { x, kernel, padding } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (dx, dk) = kernels::conv2d_backward(tx, tk, *padding, g, wants(*x), wants(*kernel));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::GlobalAvgPool(x) => {
                let tx = val(*x);
                let c = tx.shape()[0];
                let plane = tx.numel() / c;
                let d = (0..tx.numel()).map(|k| g[k / plane] / plane as f64).collect();
                send(*x, d);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut d = vec![0.0; val(*x).numel()];
                for (ch, &pos) in argmax.iter().enumerate() {
                    d[pos] += g[ch];
                }
                send(*x, d);
            }
            Op::SplitHeads { x, heads } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let _ = heads;
                send(*x, kernels::merge_heads(&gt).expect("merge").into_data());
            }
            Op::MergeHeads(x) => {
                let heads = val(*x).shape()[0];
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                send(*x, kernels::split_heads(&gt, heads).expect("split").into_data());
            }
            Op::MeanAxis0(x) => {
                let tx = val(*x);
                let s = tx.shape()[0];
                let stride = tx.numel() / s;
                let d = (0..tx.numel()).map(|k| g[k % stride] / s as f64).collect();
                send(*x, d);
            }
            Op::SliceAxis0 { x, start } => {
                let tx = val(*x);
                let stride = tx.numel() / tx.shape()[0];
                let mut d = vec![0.0; tx.numel()];
                d[start * stride..start * stride + g.len()].copy_from_slice(g);
                send(*x, d);
            }
            Op::ConcatAxis0(a, b) => {
                let na = val(*a).numel();
                if wants(*a) {
                    send(*a, g[..na].to_vec());
                }
                if wants(*b) {
                    send(*b, g[na..].to_vec());
                }
            }
            Op::SpatialMul { x, map } => {
                let (tx, tm) = (val(*x), val(*map));
                let plane = tm.numel();
                if wants(*x) {
                    let d = (0..g.len()).map(|k| g[k] * tm.data()[k % plane]).collect();
                    send(*x, d);
                }
                if wants(*map) {
                    let mut d = vec![0.0; plane];
                    for (k, v) in g.iter().enumerate() {
                        d[k % plane] += v * tx.data()[k];
                    }
                    send(*map, d);
                }
            }
            Op::MinMaxNormalize {
                x,
                argmin,
                argmax,
                range,
            } => {
                let n = g.len();
                let mut d = vec![0.0; n];
                if *range > 0.0 {
                    let y = node.value.data();
                    let mut dlo = 0.0;
                    let mut dhi = 0.0;
                    for k in 0..n {
                        d[k] = g[k] / range;
                        dlo += g[k] * (y[k] - 1.0) / range;
                        dhi -= g[k] * y[k] / range;
                    }
                    d[*argmin] += dlo;
                    d[*argmax] += dhi;
                }
                send(*x, d);
            }
            Op::WeightedSum { weights, items } => {
                let (tw, ti) = (val(*weights), val(*items));
                let gcount = tw.numel();
                let stride = ti.numel() / gcount;
                if wants(*weights) {
                    let d = (0..gcount)
                        .map(|k| {
                            ti.data()[k * stride..(k + 1) * stride]
                                .iter()
                                .zip(g)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    send(*weights, d);
                }
                if wants(*items) {
                    let d = (0..ti.numel())
                        .map(|k| tw.data()[k / stride] * g[k % stride])
                        .collect();
                    send(*items, d);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*label] -= g[0];
                send(*logits, d);
            }
        }
    }
}
