//! Batch sources: turn dataset samples into graph inputs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::ItxnGraph;
use crate::graph::Inputs;
use crate::kernels::Mode;
use crate::rng::RngStream;
use crate::sampling::{build_super_image, sample_segments, ChannelNorm};
use crate::stnet::CLIPS_INPUT;
use crate::synthdata::{ClipDataset, SeqDataset};
use crate::tensor::{Scalar, Tensor};

pub trait BatchSource<S: Scalar>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    fn num_classes(&self) -> usize;

    /// Inputs for samples `idx`; `rng` seeds per-sample randomness (`rng.split(i)`).
    fn inputs(&self, idx: &[usize], mode: Mode, rng: &RngStream) -> Result<Inputs<S>>;
}

/// Clips sampled into `segments` super images of `n_frames` frames.
pub struct ClipSource<'a> {
    pub data: &'a ClipDataset,
    pub n_frames: usize,
    pub segments: usize,
    pub norm: Option<ChannelNorm>,
}

impl<S: Scalar> BatchSource<S> for ClipSource<'_> {
    fn len(&self) -> usize {
        self.data.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.data.samples[i].label
    }

    fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    fn inputs(&self, idx: &[usize], mode: Mode, rng: &RngStream) -> Result<Inputs<S>> {
        let mut clips = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self.data.samples.get(i).ok_or_else(|| Error::invalid(format!("sample {i} out of range")))?;
            let offs = sample_segments(s.clip.len(), self.segments, self.n_frames, mode, &rng.split(i as u64))?;
            clips.push(build_super_image::<S>(&s.clip, &offs, self.n_frames, self.norm.as_ref())?);
        }
        Ok(BTreeMap::from([(CLIPS_INPUT.to_string(), Tensor::stack(&clips)?)]))
    }
}

/// Modality bundles fed to an iTXN or single-modality TXN graph.
pub struct SeqSource<'a> {
    pub data: &'a SeqDataset,
    pub model: &'a ItxnGraph,
}

impl<S: Scalar> BatchSource<S> for SeqSource<'_> {
    fn len(&self) -> usize {
        self.data.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.data.samples[i].label
    }

    fn num_classes(&self) -> usize {
        self.data.num_classes
    }

    fn inputs(&self, idx: &[usize], _mode: Mode, _rng: &RngStream) -> Result<Inputs<S>> {
        let bundles = idx
            .iter()
            .map(|&i| self.data.samples.get(i).map(|s| &s.bundle).ok_or_else(|| Error::invalid(format!("sample {i} out of range"))))
            .collect::<Result<Vec<_>>>()?;
        self.model.inputs(&bundles)
    }
}
