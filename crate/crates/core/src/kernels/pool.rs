//! Windowed and global pooling over the trailing spatial axes of `[B, C, *S]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Output of a max pool keeps the flat input index each output came from.
pub struct PoolOutput<S> {
    pub y: Tensor<S>,
    pub argmax: Option<Vec<usize>>,
}

fn split(shape: &[usize], rank: usize, op: &'static str) -> Result<(usize, Vec<usize>)> {
    if shape.len() != rank + 2 {
        return Err(Error::shape(op, format!("expected rank {} input, got {shape:?}", rank + 2)));
    }
    Ok((shape[0] * shape[1], shape[2..].to_vec()))
}

fn promote(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

pub fn pool_forward<S: Scalar>(x: &Tensor<S>, kind: PoolKind, window: &[usize], stride: &[usize]) -> Result<PoolOutput<S>> {
    let rank = window.len();
    if !(1..=3).contains(&rank) || stride.len() != rank {
        return Err(Error::shape("pool", format!("window {window:?} / stride {stride:?} must have 1..=3 equal entries")));
    }
    let (planes, sp) = split(x.shape(), rank, "pool")?;
    if window.iter().chain(stride).any(|&v| v == 0) {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    for (d, (&w, &s)) in window.iter().zip(&sp).enumerate() {
        if w > s {
            return Err(Error::shape("pool", format!("window {w} exceeds input size {s} on spatial axis {d}")));
        }
    }
    let inp = promote(&sp, 1);
    let win = promote(window, 1);
    let st = promote(stride, 1);
    let out: Vec<usize> = (0..3).map(|d| (inp[d] - win[d]) / st[d] + 1).collect();
    let in_vol: usize = inp.iter().product();
    let out_vol: usize = out.iter().product();
    let mut y = Vec::with_capacity(planes * out_vol);
    let mut arg = (kind == PoolKind::Max).then(|| Vec::with_capacity(planes * out_vol));
    let inv = S::ONE / S::from_usize(win.iter().product());
    let xd = x.data();
    for p in 0..planes {
        let base = p * in_vol;
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = None::<(S, usize)>;
                    let mut acc = S::ZERO;
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            for c in 0..win[2] {
                                let idx = base + ((od * st[0] + a) * inp[1] + oh * st[1] + b) * inp[2] + ow * st[2] + c;
                                let v = xd[idx];
                                match kind {
                                    PoolKind::Max => {
                                        if best.is_none_or(|(bv, _)| v > bv) {
                                            best = Some((v, idx));
                                        }
                                    }
                                    PoolKind::Avg => acc += v,
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            let (v, i) = best.expect("window is non-empty");
                            y.push(v);
                            if let Some(a) = arg.as_mut() {
                                a.push(i);
                            }
                        }
                        PoolKind::Avg => y.push(acc * inv),
                    }
                }
            }
        }
    }
    let mut shape = x.shape()[..2].to_vec();
    shape.extend_from_slice(&out[3 - rank..]);
    Ok(PoolOutput {
        y: Tensor::new(shape, y)?,
        argmax: arg,
    })
}

pub fn pool_backward<S: Scalar>(
    x_shape: &[usize],
    dy: &Tensor<S>,
    kind: PoolKind,
    window: &[usize],
    stride: &[usize],
    argmax: Option<&[usize]>,
) -> Result<Tensor<S>> {
    let mut dx = vec![S::ZERO; x_shape.iter().product()];
    match kind {
        PoolKind::Max => {
            let arg = argmax.ok_or_else(|| Error::invalid("max pool backward needs argmax"))?;
            for (&i, &g) in arg.iter().zip(dy.data()) {
                dx[i] += g;
            }
        }
        PoolKind::Avg => {
            let sp = &x_shape[2..];
            let inp = promote(sp, 1);
            let win = promote(window, 1);
            let st = promote(stride, 1);
            let out: Vec<usize> = (0..3).map(|d| (inp[d] - win[d]) / st[d] + 1).collect();
            let in_vol: usize = inp.iter().product();
            let inv = S::ONE / S::from_usize(win.iter().product());
            let planes = x_shape[0] * x_shape[1];
            let mut k = 0;
            for p in 0..planes {
                let base = p * in_vol;
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let g = dy.data()[k] * inv;
                            k += 1;
                            for a in 0..win[0] {
                                for b in 0..win[1] {
                                    for c in 0..win[2] {
                                        dx[base + ((od * st[0] + a) * inp[1] + oh * st[1] + b) * inp[2] + ow * st[2] + c] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Reduces every trailing axis: `[B, C, *S] -> [B, C]`.
pub fn global_pool_forward<S: Scalar>(x: &Tensor<S>, kind: PoolKind) -> Result<PoolOutput<S>> {
    if x.rank() < 3 {
        return Err(Error::shape("global pool", format!("expected [B, C, *S], got {:?}", x.shape())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let mut y = Vec::with_capacity(b * c);
    let mut arg = (kind == PoolKind::Max).then(|| Vec::with_capacity(b * c));
    let inv = S::ONE / S::from_usize(inner);
    for (p, plane) in x.data().chunks_exact(inner).enumerate() {
        match kind {
            PoolKind::Avg => y.push(plane.iter().copied().sum::<S>() * inv),
            PoolKind::Max => {
                let mut bi = 0;
                for (i, &v) in plane.iter().enumerate() {
                    if v > plane[bi] {
                        bi = i;
                    }
                }
                y.push(plane[bi]);
                if let Some(a) = arg.as_mut() {
                    a.push(p * inner + bi);
                }
            }
        }
    }
    Ok(PoolOutput {
        y: Tensor::new(vec![b, c], y)?,
        argmax: arg,
    })
}

pub fn global_pool_backward<S: Scalar>(x_shape: &[usize], dy: &Tensor<S>, kind: PoolKind, argmax: Option<&[usize]>) -> Result<Tensor<S>> {
    let inner: usize = x_shape[2..].iter().product();
    let mut dx = vec![S::ZERO; x_shape.iter().product()];
    match kind {
        PoolKind::Avg => {
            let inv = S::ONE / S::from_usize(inner);
            for (plane, &g) in dx.chunks_exact_mut(inner).zip(dy.data()) {
                plane.fill(g * inv);
            }
        }
        PoolKind::Max => {
            let arg = argmax.ok_or_else(|| Error::invalid("max pool backward needs argmax"))?;
            for (&i, &g) in arg.iter().zip(dy.data()) {
                dx[i] += g;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}
