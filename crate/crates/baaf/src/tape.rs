//! Reverse-mode autodiff over a linear tape.
//!
//! Every operation appends a node holding its output value, the operation
//! tag and whatever the backward rule needs. Parent ids are always smaller
//! than the node's own id, so the reverse sweep is a plain descending loop
//! and gradient accumulation happens in one fixed order — runs are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvGeom, Padding};
use crate::tensor::{broadcastable, c, reduce_to_shape, zip_broadcast, Elem, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<T: Elem> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: ValueId,
        b: ValueId,
    },
    Relu(ValueId),
    LeakyRelu(ValueId, T),
    Sigmoid(ValueId),
    Dense {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
    },
    Conv2d {
        x: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: ValueId,
        argmax: Vec<u32>,
    },
    Upsample2(ValueId),
    ConcatC(ValueId, ValueId),
    NarrowC {
        x: ValueId,
        start: usize,
        len: usize,
    },
    Gap(ValueId),
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        saved: BnSaved<T>,
    },
    Reshape(ValueId),
    Sum(ValueId),
    Bce {
        pred: ValueId,
        target: Tensor<T>,
        clamp: T,
    },
}

impl<T: Elem> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2(_) => "upsample_nearest2",
            Op::ConcatC(..) => "concat_channels",
            Op::NarrowC { .. } => "narrow_channels",
            Op::Gap(_) => "global_avg_pool",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node<T: Elem> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Running batch-norm statistics, owned by the caller.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Elem> BnStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Gradients for every node, indexed by node id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    /// Gradient of the loss w.r.t. this node; zeros if disconnected.
    pub fn get(&self, id: ValueId, shape: &[usize]) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_connected(&self, id: ValueId) -> bool {
        self.grads[id.0].is_some()
    }
}

pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
    /// Debug hook: perturb the backward rule of the named op so the
    /// gradient checker's negative control has something to catch.
    corrupt_op: Option<String>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            corrupt_op: None,
        }
    }

    pub fn set_backward_corruption(&mut self, op_name: &str) {
        self.corrupt_op = Some(op_name.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() && !broadcastable(va.shape(), vb.shape()) {
            return Err(Error::shape_mismatch("elementwise", va.shape(), vb.shape()));
        }
        let value = match kind {
            BinaryKind::Add => zip_broadcast(va, vb, "add", |x, y| x + y)?,
            BinaryKind::Sub => zip_broadcast(va, vb, "sub", |x, y| x - y)?,
            BinaryKind::Mul => zip_broadcast(va, vb, "mul", |x, y| x * y)?,
        };
        Ok(self.push(Op::Binary { kind, a, b }, value))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let value = self.nodes[x.0]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(x), value)
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: T) -> ValueId {
        let value = self.nodes[x.0]
            .value
            .map(|v| if v >= T::zero() { v } else { slope * v });
        self.push(Op::LeakyRelu(x, slope), value)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let value = self.nodes[x.0].value.map(stable_sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    /// W·x (+ bias). `x` is [C_in] or [N×C_in], `w` is [C_out×C_in].
    pub fn dense(&mut self, x: ValueId, w: ValueId, bias: Option<ValueId>) -> Result<ValueId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        if ws.len() != 2 {
            return Err(Error::invalid(format!(
                "dense weight must be 2-D, got {ws:?}"
            )));
        }
        let (n, c_in) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => {
                return Err(Error::invalid(format!(
                    "dense input must be 1-D or 2-D, got {xs:?}"
                )))
            }
        };
        if ws[1] != c_in {
            return Err(Error::shape_mismatch("dense", &xs, &ws));
        }
        let c_out = ws[0];
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [c_out] {
                return Err(Error::shape_mismatch("dense bias", bs, &[c_out]));
            }
        }
        let mut out = vec![T::zero(); n * c_out];
        // out[s,o] = Σ_i w[o,i]·x[s,i]
        kernels::matmul_nt_acc(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &mut out,
            n,
            c_in,
            c_out,
        );
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for s in 0..n {
                for o in 0..c_out {
                    out[s * c_out + o] += bd[o];
                }
            }
        }
        let out_shape = if xs.len() == 1 {
            vec![c_out]
        } else {
            vec![n, c_out]
        };
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(Op::Dense { x, w, bias }, value))
    }

    /// Cross-correlation, zero padding. `x` is [C×H×W] or [N×C×H×W],
    /// `kernel` [C_out×C_in×k×k], optional bias [C_out].
    pub fn conv2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let ks = self.nodes[kernel.0].value.shape().to_vec();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::invalid(format!(
                "conv kernel must be [C_out×C_in×k×k], got {ks:?}"
            )));
        }
        let x4 = match xs.len() {
            4 => x,
            3 => self.reshape(x, &[1, xs[0], xs[1], xs[2]])?,
            _ => {
                return Err(Error::invalid(format!(
                    "conv input must be 3-D or 4-D, got {xs:?}"
                )))
            }
        };
        let s4 = self.nodes[x4.0].value.shape().to_vec();
        if s4[1] != ks[1] {
            return Err(Error::shape_mismatch("conv channels", &s4, &ks));
        }
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [ks[0]] {
                return Err(Error::shape_mismatch("conv bias", bs, &[ks[0]]));
            }
        }
        let geom = ConvGeom::new(ks[1], ks[0], ks[2], stride, padding, s4[2], s4[3])?;
        let value = kernels::conv2d_forward(
            &self.nodes[x4.0].value,
            &self.nodes[kernel.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            &geom,
        );
        let out = self.push(
            Op::Conv2d {
                x: x4,
                kernel,
                bias,
                geom,
            },
            value,
        );
        if xs.len() == 3 {
            let os = self.nodes[out.0].value.shape().to_vec();
            self.reshape(out, &[os[1], os[2], os[3]])
        } else {
            Ok(out)
        }
    }

    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId> {
        let (x4, was3) = self.lift4(x)?;
        let (value, argmax) = kernels::maxpool2_forward(&self.nodes[x4.0].value)?;
        let out = self.push(Op::MaxPool2 { x: x4, argmax }, value);
        self.unlift(out, was3)
    }

    pub fn upsample_nearest2(&mut self, x: ValueId) -> Result<ValueId> {
        let (x4, was3) = self.lift4(x)?;
        let value = kernels::upsample2_forward(&self.nodes[x4.0].value);
        let out = self.push(Op::Upsample2(x4), value);
        self.unlift(out, was3)
    }

    /// Concatenate along the channel axis (axis 1; axis 0 for rank-1 is not
    /// supported — reshape first).
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (a4, was3) = self.lift_pair(a, b)?;
        let (a4, b4) = a4;
        let sa = self.nodes[a4.0].value.shape().to_vec();
        let sb = self.nodes[b4.0].value.shape().to_vec();
        if sa.len() != sb.len() || sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape_mismatch("concat_channels", &sa, &sb));
        }
        let inner: usize = sa[2..].iter().product();
        let (n, c1, c2) = (sa[0], sa[1], sb[1]);
        let mut out_shape = sa.clone();
        out_shape[1] = c1 + c2;
        let mut out = Tensor::zeros(&out_shape);
        let da = self.nodes[a4.0].value.data();
        let db = self.nodes[b4.0].value.data();
        for s in 0..n {
            let dst = &mut out.data_mut()[s * (c1 + c2) * inner..(s + 1) * (c1 + c2) * inner];
            dst[..c1 * inner].copy_from_slice(&da[s * c1 * inner..(s + 1) * c1 * inner]);
            dst[c1 * inner..].copy_from_slice(&db[s * c2 * inner..(s + 1) * c2 * inner]);
        }
        let out = self.push(Op::ConcatC(a4, b4), out);
        self.unlift(out, was3)
    }

    /// Slice `len` channels starting at `start` along the channel axis.
    pub fn narrow_channels(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (x4, was3) = self.lift_channel_axis(x)?;
        let s = self.nodes[x4.0].value.shape().to_vec();
        if start + len > s[1] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {start}+{len}) out of {} channels",
                s[1]
            )));
        }
        let inner: usize = s[2..].iter().product();
        let n = s[0];
        let mut out_shape = s.clone();
        out_shape[1] = len;
        let mut out = Tensor::zeros(&out_shape);
        let src = self.nodes[x4.0].value.data();
        for sm in 0..n {
            let src_base = sm * s[1] * inner + start * inner;
            out.data_mut()[sm * len * inner..(sm + 1) * len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let out = self.push(Op::NarrowC { x: x4, start, len }, out);
        self.unlift(out, was3)
    }

    /// Per-channel spatial mean. [N×C×H×W] → [N×C]; [C×H×W] → [C].
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let (x4, was3) = self.lift4(x)?;
        let value = kernels::gap_forward(&self.nodes[x4.0].value);
        let out = self.push(Op::Gap(x4), value);
        if was3 {
            let ch = self.nodes[out.0].value.shape()[1];
            self.reshape(out, &[ch])
        } else {
            Ok(out)
        }
    }

    /// Channel-wise normalization. Train mode uses batch statistics and
    /// folds them into `stats` with the given momentum; eval mode reads
    /// `stats` as-is.
    pub fn batchnorm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        train: bool,
        eps: T,
        momentum: T,
        stats: &mut BnStats<T>,
    ) -> Result<ValueId> {
        let (x4, was3) = self.lift4(x)?;
        let s = self.nodes[x4.0].value.shape().to_vec();
        let ch = s[1];
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let gs = self.nodes[id.0].value.shape();
            if gs != [ch] {
                return Err(Error::shape_mismatch(&format!("batchnorm {name}"), gs, &[ch]));
            }
        }
        if stats.mean.shape() != [ch] || stats.var.shape() != [ch] {
            return Err(Error::shape_mismatch(
                "batchnorm running stats",
                stats.mean.shape(),
                &[ch],
            ));
        }
        let (value, saved, batch_stats) = kernels::batchnorm_forward(
            &self.nodes[x4.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            &stats.mean,
            &stats.var,
            train,
            eps,
        )?;
        if let Some((bmean, bvar)) = batch_stats {
            for i in 0..ch {
                stats.mean.data_mut()[i] =
                    momentum * stats.mean.data()[i] + (T::one() - momentum) * bmean.data()[i];
                stats.var.data_mut()[i] =
                    momentum * stats.var.data()[i] + (T::one() - momentum) * bvar.data()[i];
            }
        }
        let out = self.push(
            Op::BatchNorm {
                x: x4,
                gamma,
                beta,
                saved,
            },
            value,
        );
        self.unlift(out, was3)
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Sum of all elements, scalar output.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let mut acc = 0.0f64;
        for &v in self.nodes[x.0].value.data() {
            acc += v.to_f64().unwrap();
        }
        self.push(Op::Sum(x), Tensor::from_vec(vec![1], vec![c(acc)]).unwrap())
    }

    /// Mean binary cross entropy; predictions clamped to
    /// [clamp, 1−clamp] before the logs.
    pub fn bce_loss(&mut self, pred: ValueId, target: &Tensor<T>) -> Result<ValueId> {
        let p = &self.nodes[pred.0].value;
        if p.shape() != target.shape() {
            return Err(Error::shape_mismatch("bce_loss", p.shape(), target.shape()));
        }
        let clamp = c::<T>(1e-7);
        let hi = T::one() - clamp;
        let mut acc = 0.0f64;
        for (&pv, &yv) in p.data().iter().zip(target.data()) {
            let pc = pv.max(clamp).min(hi);
            let y = yv.to_f64().unwrap();
            let pcf = pc.to_f64().unwrap();
            acc -= y * pcf.ln() + (1.0 - y) * (1.0 - pcf).ln();
        }
        let loss = acc / p.numel() as f64;
        let value = Tensor::from_vec(vec![1], vec![c(loss)])?;
        Ok(self.push(
            Op::Bce {
                pred,
                target: target.clone(),
                clamp,
            },
            value,
        ))
    }

    fn lift4(&mut self, x: ValueId) -> Result<(ValueId, bool)> {
        let s = self.nodes[x.0].value.shape().to_vec();
        match s.len() {
            4 => Ok((x, false)),
            3 => Ok((self.reshape(x, &[1, s[0], s[1], s[2]])?, true)),
            _ => Err(Error::invalid(format!(
                "expected 3-D or 4-D tensor, got {s:?}"
            ))),
        }
    }

    /// Channel axis is axis 0 for rank 1/3 tensors and axis 1 for
    /// rank 2/4; lift the former so axis 1 is always the channel axis.
    fn lift_channel_axis(&mut self, x: ValueId) -> Result<(ValueId, bool)> {
        let s = self.nodes[x.0].value.shape().to_vec();
        match s.len() {
            1 | 3 => {
                let mut lifted = vec![1];
                lifted.extend_from_slice(&s);
                Ok((self.reshape(x, &lifted)?, true))
            }
            2 | 4 => Ok((x, false)),
            _ => Err(Error::invalid(format!(
                "channel ops support rank 1–4, got {s:?}"
            ))),
        }
    }

    fn lift_pair(&mut self, a: ValueId, b: ValueId) -> Result<((ValueId, ValueId), bool)> {
        let ra = self.nodes[a.0].value.shape().len();
        let rb = self.nodes[b.0].value.shape().len();
        if ra == 3 && rb == 3 {
            let sa = self.nodes[a.0].value.shape().to_vec();
            let sb = self.nodes[b.0].value.shape().to_vec();
            let a4 = self.reshape(a, &[1, sa[0], sa[1], sa[2]])?;
            let b4 = self.reshape(b, &[1, sb[0], sb[1], sb[2]])?;
            Ok(((a4, b4), true))
        } else {
            Ok(((a, b), false))
        }
    }

    fn unlift(&mut self, out: ValueId, was3: bool) -> Result<ValueId> {
        if !was3 {
            return Ok(out);
        }
        let s = self.nodes[out.0].value.shape().to_vec();
        self.reshape(out, &s[1..])
    }

    /// Reverse sweep from the scalar loss node. Returns a gradient per
    /// node id; leaves not reached by the sweep stay disconnected
    /// (treated as exact zeros).
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let corrupt = self
                .corrupt_op
                .as_deref()
                .is_some_and(|name| name == node.op.name());
            let mut contributions: Vec<(ValueId, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Binary { kind, a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    match kind {
                        BinaryKind::Add => {
                            contributions.push((*a, g.clone()));
                            contributions.push((*b, reduce_to_shape(&g, vb.shape())));
                        }
                        BinaryKind::Sub => {
                            contributions.push((*a, g.clone()));
                            let neg = g.map(|v| -v);
                            contributions.push((*b, reduce_to_shape(&neg, vb.shape())));
                        }
                        BinaryKind::Mul => {
                            let ga = zip_broadcast(&g, vb, "mul backward", |x, y| x * y)?;
                            contributions.push((*a, ga));
                            let gb_full =
                                zip_broadcast(va, &g, "mul backward", |x, y| x * y)?;
                            contributions.push((*b, reduce_to_shape(&gb_full, vb.shape())));
                        }
                    }
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[x.0].value;
                    let mut gx = g.clone();
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(vx.data()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    contributions.push((*x, gx));
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = &self.nodes[x.0].value;
                    let mut gx = g.clone();
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(vx.data()) {
                        if xv < T::zero() {
                            *gv *= *slope;
                        }
                    }
                    contributions.push((*x, gx));
                }
                Op::Sigmoid(x) => {
                    let vy = &node.value;
                    let mut gx = g.clone();
                    for (gv, &yv) in gx.data_mut().iter_mut().zip(vy.data()) {
                        *gv *= yv * (T::one() - yv);
                    }
                    contributions.push((*x, gx));
                }
                Op::Dense { x, w, bias } => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let (c_out, c_in) = (vw.shape()[0], vw.shape()[1]);
                    let n = if vx.shape().len() == 1 {
                        1
                    } else {
                        vx.shape()[0]
                    };
                    // gx[s,i] = Σ_o g[s,o]·w[o,i]
                    let mut gx = vec![T::zero(); n * c_in];
                    kernels::matmul_acc(g.data(), vw.data(), &mut gx, n, c_out, c_in);
                    contributions.push((*x, Tensor::from_vec(vx.shape().to_vec(), gx)?));
                    // gw[o,i] = Σ_s g[s,o]·x[s,i]
                    let mut gw = vec![T::zero(); c_out * c_in];
                    kernels::matmul_tn_acc(g.data(), vx.data(), &mut gw, n, c_out, c_in);
                    contributions.push((*w, Tensor::from_vec(vec![c_out, c_in], gw)?));
                    if let Some(b) = bias {
                        let mut gb = vec![T::zero(); c_out];
                        for s in 0..n {
                            for o in 0..c_out {
                                gb[o] += g.data()[s * c_out + o];
                            }
                        }
                        contributions.push((*b, Tensor::from_vec(vec![c_out], gb)?));
                    }
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (gx, gk, gb) = kernels::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[kernel.0].value,
                        &g,
                        geom,
                        bias.is_some(),
                    );
                    contributions.push((*x, gx));
                    contributions.push((*kernel, gk));
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        contributions.push((*b, gb));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let gx =
                        kernels::maxpool2_backward(self.nodes[x.0].value.shape(), argmax, &g);
                    contributions.push((*x, gx));
                }
                Op::Upsample2(x) => {
                    contributions.push((*x, kernels::upsample2_backward(&g)));
                }
                Op::ConcatC(a, b) => {
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let inner: usize = sa[2..].iter().product();
                    let (n, c1, c2) = (sa[0], sa[1], sb[1]);
                    let mut ga = Tensor::zeros(&sa);
                    let mut gb = Tensor::zeros(&sb);
                    for s in 0..n {
                        let src = &g.data()[s * (c1 + c2) * inner..(s + 1) * (c1 + c2) * inner];
                        ga.data_mut()[s * c1 * inner..(s + 1) * c1 * inner]
                            .copy_from_slice(&src[..c1 * inner]);
                        gb.data_mut()[s * c2 * inner..(s + 1) * c2 * inner]
                            .copy_from_slice(&src[c1 * inner..]);
                    }
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::NarrowC { x, start, len } => {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let inner: usize = s[2..].iter().product();
                    let n = s[0];
                    let mut gx = Tensor::zeros(&s);
                    for sm in 0..n {
                        let dst_base = sm * s[1] * inner + start * inner;
                        gx.data_mut()[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g.data()[sm * len * inner..(sm + 1) * len * inner]);
                    }
                    contributions.push((*x, gx));
                }
                Op::Gap(x) => {
                    contributions
                        .push((*x, kernels::gap_backward(self.nodes[x.0].value.shape(), &g)));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (gx, ggamma, gbeta) =
                        kernels::batchnorm_backward(&self.nodes[gamma.0].value, saved, &g);
                    contributions.push((*x, gx));
                    contributions.push((*gamma, ggamma));
                    contributions.push((*beta, gbeta));
                }
                Op::Reshape(x) => {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    contributions.push((*x, g.reshape(&s)?));
                }
                Op::Sum(x) => {
                    let seed = g.scalar_value();
                    contributions.push((
                        *x,
                        Tensor::full(self.nodes[x.0].value.shape(), seed),
                    ));
                }
                Op::Bce {
                    pred,
                    target,
                    clamp,
                } => {
                    let seed = g.scalar_value();
                    let vp = &self.nodes[pred.0].value;
                    let count = c::<T>(vp.numel() as f64);
                    let hi = T::one() - *clamp;
                    let mut gp = Tensor::zeros(vp.shape());
                    for i in 0..vp.numel() {
                        let pv = vp.data()[i];
                        // clamped coordinates sit on a flat of the loss
                        if pv < *clamp || pv > hi {
                            continue;
                        }
                        let y = target.data()[i];
                        gp.data_mut()[i] =
                            seed * (-(y / pv) + (T::one() - y) / (T::one() - pv)) / count;
                    }
                    contributions.push((*pred, gp));
                }
            }
            if corrupt {
                if let Some((_, delta)) = contributions.first_mut() {
                    for v in delta.data_mut().iter_mut() {
                        *v += c::<T>(0.1);
                    }
                }
            }
            for (pid, delta) in contributions {
                match &mut grads[pid.0] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e += *d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid<T: Elem>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
