//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every recorded node only refers to earlier nodes, so a single reverse sweep
//! over the tape visits nodes in a valid topological order.

use crate::error::{Error, Result};
use crate::kernels::batchnorm::{BnConfig, BnSaved, Mode};
use crate::kernels::{self, ConvParams, PoolKind};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: ConvParams,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<S>,
    },
    Relu(Var),
    Add(Var, Var),
    Pool {
        x: Var,
        kind: PoolKind,
        window: Vec<usize>,
        stride: Vec<usize>,
        argmax: Option<Vec<usize>>,
    },
    GlobalPool {
        x: Var,
        kind: PoolKind,
        argmax: Option<Vec<usize>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat(Vec<Var>),
    SegmentMean {
        x: Var,
        segments: usize,
    },
    Resample {
        x: Var,
        indices: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, params: ConvParams) -> Result<Var> {
        let y = kernels::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &params)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv { x, w, b, params }, rg))
    }

    /// Returns the output and, in train mode, the updated running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor<S>, &Tensor<S>),
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<(Var, Option<(Tensor<S>, Tensor<S>)>)> {
        let out = kernels::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), running.0, running.1, mode, cfg)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: out.saved,
            },
            rg,
        );
        Ok((v, out.running))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu_forward(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, window: &[usize], stride: &[usize]) -> Result<Var> {
        let out = kernels::pool_forward(self.value(x), kind, window, stride)?;
        let rg = self.rg(x);
        Ok(self.push(
            out.y,
            Op::Pool {
                x,
                kind,
                window: window.to_vec(),
                stride: stride.to_vec(),
                argmax: out.argmax,
            },
            rg,
        ))
    }

    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let out = kernels::global_pool_forward(self.value(x), kind)?;
        let rg = self.rg(x);
        Ok(self.push(out.y, Op::GlobalPool { x, kind, argmax: out.argmax }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&ts)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::Concat(parts.to_vec()), rg))
    }

    /// `[B*T, K] -> [B, K]` mean over each sample's `T` consecutive rows.
    ///
    /// Values are summed in sorted order, so the result does not depend on the
    /// order of the segments.
    pub fn segment_mean(&mut self, x: Var, segments: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || segments == 0 || !t.shape()[0].is_multiple_of(segments) {
            return Err(Error::shape(
                "segment_mean",
                format!("{:?} is not [B*T, K] for T = {segments}", t.shape()),
            ));
        }
        let (rows, k) = (t.shape()[0], t.shape()[1]);
        let b = rows / segments;
        let inv = S::ONE / S::from_usize(segments);
        let mut out = Vec::with_capacity(b * k);
        let mut col = Vec::with_capacity(segments);
        for bi in 0..b {
            for ki in 0..k {
                col.clear();
                col.extend((0..segments).map(|s| t.data()[(bi * segments + s) * k + ki]));
                col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                out.push(col.iter().copied().sum::<S>() * inv);
            }
        }
        let y = Tensor::new(vec![b, k], out)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::SegmentMean { x, segments }, rg))
    }

    /// Gathers positions of the last axis of `[B, C, T]`.
    pub fn resample(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::shape("resample", format!("expected [B, C, T], got {:?}", t.shape())));
        }
        let len = t.shape()[2];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape("resample", format!("index {bad} out of range for length {len}")));
        }
        let mut data = Vec::with_capacity(t.shape()[0] * t.shape()[1] * indices.len());
        for row in t.data().chunks_exact(len) {
            data.extend(indices.iter().map(|&i| row[i]));
        }
        let y = Tensor::new(vec![t.shape()[0], t.shape()[1], indices.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Resample { x, indices: indices.to_vec() }, rg))
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_xent(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Hash of every piecewise-linear branch decision (ReLU signs, max-pool winners).
    ///
    /// Two forward passes with equal signatures are on the same linear piece, so a
    /// finite difference between them is not corrupted by a kink.
    pub fn branch_signature(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01B3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for (i, v) in self.nodes[x.0].value.data().iter().enumerate() {
                        if *v > S::ZERO {
                            feed(i as u64);
                        }
                    }
                    feed(u64::MAX);
                }
                Op::Pool { argmax: Some(a), .. } | Op::GlobalPool { argmax: Some(a), .. } => {
                    a.iter().for_each(|&i| feed(i as u64));
                    feed(u64::MAX - 1);
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), S::ONE));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (v, d) in self.local_grads(&node.op, &node.value, &g)? {
                if self.rg(v) {
                    accumulate(&mut grads[v.0], d);
                }
            }
        }
        Ok(Grads { grads })
    }

    fn local_grads(&self, op: &Op<S>, out: &Tensor<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        Ok(match op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, params } => {
                let r = kernels::conv_backward(self.value(*x), self.value(*w), g, params, self.rg(*x))?;
                let mut v = vec![(*w, r.dw)];
                if let Some(dx) = r.dx {
                    v.push((*x, dx));
                }
                if let Some(b) = b {
                    v.push((*b, r.db));
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let r = kernels::batchnorm_backward(g, self.value(*gamma), saved)?;
                vec![(*x, r.dx), (*gamma, r.dgamma), (*beta, r.dbeta)]
            }
            Op::Relu(x) => vec![(*x, kernels::relu_backward(self.value(*x), g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Pool {
                x,
                kind,
                window,
                stride,
                argmax,
            } => {
                let dx = kernels::pool_backward(self.value(*x).shape(), g, *kind, window, stride, argmax.as_deref())?;
                vec![(*x, dx)]
            }
            Op::GlobalPool { x, kind, argmax } => {
                let dx = kernels::global_pool_backward(self.value(*x).shape(), g, *kind, argmax.as_deref())?;
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let r = kernels::linear_backward(self.value(*x), self.value(*w), g)?;
                vec![(*x, r.dx), (*w, r.dw), (*b, r.db)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.value(*x).shape())?)],
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*x, g.permute(&inverse)?)]
            }
            Op::Concat(parts) => {
                let outer = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let total = out.shape()[1];
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let c = shape[1];
                    let mut d = Vec::with_capacity(outer * c * inner);
                    for b in 0..outer {
                        d.extend_from_slice(&g.data()[(b * total + offset) * inner..][..c * inner]);
                    }
                    offset += c;
                    res.push((p, Tensor::new(shape, d)?));
                }
                res
            }
            Op::SegmentMean { x, segments } => {
                let k = out.shape()[1];
                let inv = S::ONE / S::from_usize(*segments);
                let mut d = Vec::with_capacity(self.value(*x).len());
                for row in g.data().chunks_exact(k) {
                    for _ in 0..*segments {
                        d.extend(row.iter().map(|&v| v * inv));
                    }
                }
                vec![(*x, Tensor::new(self.value(*x).shape().to_vec(), d)?)]
            }
            Op::Resample { x, indices } => {
                let shape = self.value(*x).shape().to_vec();
                let len = shape[2];
                let mut d = vec![S::ZERO; self.value(*x).len()];
                for (dst, src) in d.chunks_exact_mut(len).zip(g.data().chunks_exact(indices.len())) {
                    for (&i, &v) in indices.iter().zip(src) {
                        dst[i] += v;
                    }
                }
                vec![(*x, Tensor::new(shape, d)?)]
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                vec![(*logits, kernels::softmax_xent_backward(probs, labels, g.data()[0]))]
            }
        })
    }
}
