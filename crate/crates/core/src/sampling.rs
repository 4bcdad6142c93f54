//! Segment sampling, super-image construction and first-layer weight inflation.
//!
//! A clip is `T` segments of `N` contiguous RGB frames; the frames of a segment
//! are stacked along the channel axis (frame `j` occupies channels `3j..3j+3`)
//! into one `3N`-channel super image, giving a `[T, 3N, H, W]` tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// `F` RGB frames of `H x W`, values in `[0, 1]`, stored as `[F, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor<f32>,
}

impl FrameSequence {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[1] != 3 {
            return Err(Error::shape("frame sequence", format!("expected [F, 3, H, W], got {:?}", frames.shape())));
        }
        Ok(FrameSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    /// Pixels of frame `i` (`3 * H * W` values).
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = 3 * self.height() * self.width();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    /// Writes the raw clip format: `F, H, W` as little-endian u32, then the frames as
    /// little-endian f32 in `[F, 3, H, W]` order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.frames.len());
        for d in [self.len(), self.height(), self.width()] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        if buf.len() < 12 {
            return Err(bad("missing header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        let (f, h, w) = (dim(0), dim(1), dim(2));
        let expect = 12 + 4 * f * 3 * h * w;
        if buf.len() != expect || f == 0 || h == 0 || w == 0 {
            return Err(bad(format!("header F={f} H={h} W={w} needs {expect} bytes, file has {}", buf.len())));
        }
        let data = buf[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        FrameSequence::new(Tensor::new(vec![f, 3, h, w], data)?)
    }
}

/// Per-channel normalization applied while building super images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Batch of clips `[B, T, 3N, H, W]` with labels.
#[derive(Clone, Debug)]
pub struct SuperImageBatch<S> {
    pub clips: Tensor<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> SuperImageBatch<S> {
    pub fn segments(&self) -> usize {
        self.clips.shape()[1]
    }

    /// Frames per segment (`3N / 3`).
    pub fn frames_per_segment(&self) -> usize {
        self.clips.shape()[2] / 3
    }
}

/// Start frame of each of the `T` segments.
///
/// With `L = floor(F / T) >= N`, segment `i` starts at `i*L + u_i`, where `u_i` is
/// uniform over `0..=L-N` in train mode (drawn from `rng.split(i)`) and
/// `floor((L-N)/2)` in eval mode. Otherwise segments start at `i*L` clamped to
/// `[0, F-1]` and the frame reader pads with the last frame.
pub fn sample_segments(f: usize, t: usize, n: usize, mode: Mode, rng: &RngStream) -> Result<Vec<usize>> {
    if f == 0 || t == 0 || n == 0 {
        return Err(Error::invalid(format!("sample_segments needs positive F, T, N (got {f}, {t}, {n})")));
    }
    let l = f / t;
    Ok((0..t)
        .map(|i| {
            let slack = if l >= n {
                match mode {
                    Mode::Train => rng.split(i as u64).rng().below_inclusive(l - n),
                    Mode::Eval => (l - n) / 2,
                }
            } else {
                0
            };
            (i * l + slack).min(f - 1)
        })
        .collect())
}

/// Stacks `N` frames per offset into `[T, 3N, H, W]`; frames past the end repeat the last frame.
pub fn build_super_image<S: Scalar>(seq: &FrameSequence, offsets: &[usize], n: usize, norm: Option<&ChannelNorm>) -> Result<Tensor<S>> {
    if offsets.is_empty() || n == 0 {
        return Err(Error::invalid("build_super_image needs at least one offset and N >= 1"));
    }
    let (h, w) = (seq.height(), seq.width());
    let plane = h * w;
    let last = seq.len() - 1;
    let mut data = Vec::with_capacity(offsets.len() * 3 * n * plane);
    for &o in offsets {
        for j in 0..n {
            let frame = seq.frame((o + j).min(last));
            for c in 0..3 {
                let px = &frame[c * plane..(c + 1) * plane];
                match norm {
                    None => data.extend(px.iter().map(|&v| S::from_f64(v as f64))),
                    Some(nm) => data.extend(px.iter().map(|&v| S::from_f64(((v - nm.mean[c]) / nm.std[c]) as f64))),
                }
            }
        }
    }
    Tensor::new(vec![offsets.len(), 3 * n, h, w], data)
}

/// Replicates a 3-channel kernel across `N` frames, dividing by `N`, so that the
/// inflated kernel applied to `N` identical frames equals the 2-D kernel on one.
pub fn inflate_conv1_weights<S: Scalar>(w2d: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    if w2d.rank() != 4 || w2d.shape()[1] != 3 {
        return Err(Error::shape("inflate_conv1_weights", format!("expected [C_out, 3, k, k], got {:?}", w2d.shape())));
    }
    if n == 0 {
        return Err(Error::invalid("inflation needs N >= 1"));
    }
    let (co, kk) = (w2d.shape()[0], w2d.shape()[2] * w2d.shape()[3]);
    let scale = S::ONE / S::from_usize(n);
    let mut data = Vec::with_capacity(co * 3 * n * kk);
    for o in 0..co {
        let src = &w2d.data()[o * 3 * kk..(o + 1) * 3 * kk];
        for _ in 0..n {
            data.extend(src.iter().map(|&v| if n == 1 { v } else { v * scale }));
        }
    }
    Tensor::new(vec![co, 3 * n, w2d.shape()[2], w2d.shape()[3]], data)
}
