//! StNet: a 2-D residual backbone over super images, temporal `(3,1,1)` Conv3d-BN3d-ReLU
//! blocks after residual stages 3 and 4, and a temporal Xception head over the
//! per-segment embeddings. The order-blind TSN-style baseline shares the backbone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{txn_layers, TxnBlockCfg};
use crate::graph::{Description, ExecOptions, Forward, InputKind, Inputs, LayerKind, LayerSpec, ModelGraph};
use crate::kernels::{BnConfig, Mode, PoolKind};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::sampling::{inflate_conv1_weights, SuperImageBatch};
use crate::tensor::{Scalar, Tensor};

pub const CLIPS_INPUT: &str = "clips";
pub const STEM_CONV: &str = "stem.conv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Residual backbone; stages are numbered from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

impl Default for BackboneSpec {
    /// Four stages of one basic block each, 16/32/64/128 channels.
    fn default() -> Self {
        BackboneSpec {
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 2,
            },
            stages: [(16, 1), (32, 2), (64, 2), (128, 2)]
                .into_iter()
                .map(|(channels, stride)| StageSpec { blocks: 1, channels, stride })
                .collect(),
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 4 {
            return Err(Error::invalid(format!(
                "backbone needs at least 4 stages (temporal blocks follow stages 3 and 4), got {}",
                self.stages.len()
            )));
        }
        let s = &self.stem;
        if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
            return Err(Error::invalid("stem channels, kernel and stride must be positive"));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.channels == 0 || st.stride == 0 {
                return Err(Error::invalid(format!("stage {} has a zero field: {st:?}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }
}

/// Temporal modelling block: Conv3d `(C_i -> C_i, (3,1,1), groups 1)`, BN3d, ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalBlockSpec {
    pub insert_after_stage: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub groups: usize,
}

impl TemporalBlockSpec {
    /// Conv weights + conv bias + BN gamma/beta.
    pub fn param_count(&self) -> usize {
        let c = self.out_channels;
        c * (c / self.groups) * self.kernel.iter().product::<usize>() + c + 2 * c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Temporal Xception block over `[B, C, T]`, then a linear classifier.
    Txn,
    /// Per-segment linear classifier averaged over segments (TSN style).
    SegmentMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StNetConfig {
    pub backbone: BackboneSpec,
    /// Frames per segment (`N`); the stem sees `3N` channels.
    pub n_frames: usize,
    pub num_classes: usize,
    pub txn: TxnBlockCfg,
    pub temporal_stages: Vec<usize>,
    /// Wrap each temporal block in an identity shortcut.
    pub residual_temporal_block: bool,
    pub head: HeadKind,
    pub bn: BnConfig,
}

impl Default for StNetConfig {
    fn default() -> Self {
        StNetConfig {
            backbone: BackboneSpec::default(),
            n_frames: 5,
            num_classes: 10,
            txn: TxnBlockCfg::default(),
            temporal_stages: vec![3, 4],
            residual_temporal_block: false,
            head: HeadKind::Txn,
            bn: BnConfig::default(),
        }
    }
}

impl StNetConfig {
    /// Same backbone without temporal blocks and with a segment-mean head.
    pub fn tsn_baseline(&self) -> Self {
        StNetConfig {
            temporal_stages: vec![],
            head: HeadKind::SegmentMean,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StNetGraph {
    pub config: StNetConfig,
    pub temporal_blocks: Vec<TemporalBlockSpec>,
    pub graph: ModelGraph,
}

fn conv2d(name: String, cin: usize, cout: usize, k: usize, stride: usize, input: &str) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel: vec![k, k],
            stride: vec![stride, stride],
            padding: vec![k / 2, k / 2],
            groups: 1,
            bias: false,
        },
        &[input],
    )
}

fn bn(name: String, channels: usize, rank: usize, input: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::BatchNorm { channels, rank }, &[input])
}

fn relu(name: String, input: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu, &[input])
}

/// Builds the StNet (or, with [`StNetConfig::tsn_baseline`], the TSN baseline) graph.
pub fn build_stnet(cfg: &StNetConfig) -> Result<StNetGraph> {
    cfg.backbone.validate()?;
    if cfg.n_frames == 0 {
        return Err(Error::invalid("n_frames (N) must be at least 1"));
    }
    if cfg.num_classes == 0 {
        return Err(Error::invalid("num_classes must be at least 1"));
    }
    let stages = &cfg.backbone.stages;
    for &s in &cfg.temporal_stages {
        if s == 0 || s > stages.len() {
            return Err(Error::invalid(format!("temporal block after stage {s}, but stages are 1..={}", stages.len())));
        }
    }

    let mut layers = Vec::new();
    let mut temporal_blocks = Vec::new();
    let push = |l: LayerSpec, block: &str, layers: &mut Vec<LayerSpec>| -> String {
        let name = l.name.clone();
        layers.push(l.in_block(block));
        name
    };

    let c_in = 3 * cfg.n_frames;
    push(
        LayerSpec::new(
            CLIPS_INPUT,
            LayerKind::Input {
                input: InputKind::Clips,
                channels: c_in,
            },
            &[],
        ),
        "input",
        &mut layers,
    );
    let mut cur = push(LayerSpec::new("merge_segments", LayerKind::MergeSegments, &[CLIPS_INPUT]), "input", &mut layers);

    let st = &cfg.backbone.stem;
    cur = push(conv2d(STEM_CONV.into(), c_in, st.channels, st.kernel, st.stride, &cur), "stem", &mut layers);
    cur = push(bn("stem.bn".into(), st.channels, 2, &cur), "stem", &mut layers);
    cur = push(relu("stem.relu".into(), &cur), "stem", &mut layers);
    let mut channels = st.channels;

    for (si, stage) in stages.iter().enumerate() {
        let sn = si + 1;
        let block_name = format!("stage{sn}");
        for bi in 0..stage.blocks {
            let p = format!("stage{sn}.block{}", bi + 1);
            let stride = if bi == 0 { stage.stride } else { 1 };
            let input = cur.clone();
            let mut x = push(conv2d(format!("{p}.conv1"), channels, stage.channels, 3, stride, &input), &block_name, &mut layers);
            x = push(bn(format!("{p}.bn1"), stage.channels, 2, &x), &block_name, &mut layers);
            x = push(relu(format!("{p}.relu1"), &x), &block_name, &mut layers);
            x = push(conv2d(format!("{p}.conv2"), stage.channels, stage.channels, 3, 1, &x), &block_name, &mut layers);
            x = push(bn(format!("{p}.bn2"), stage.channels, 2, &x), &block_name, &mut layers);
            let shortcut = if stride != 1 || channels != stage.channels {
                let s = push(conv2d(format!("{p}.proj.conv"), channels, stage.channels, 1, stride, &input), &block_name, &mut layers);
                push(bn(format!("{p}.proj.bn"), stage.channels, 2, &s), &block_name, &mut layers)
            } else {
                input
            };
            let sum = push(LayerSpec::new(format!("{p}.add"), LayerKind::Add, &[&x, &shortcut]), &block_name, &mut layers);
            cur = push(relu(format!("{p}.relu"), &sum), &block_name, &mut layers);
            channels = stage.channels;
        }

        if cfg.temporal_stages.contains(&sn) {
            let tb = TemporalBlockSpec {
                insert_after_stage: sn,
                out_channels: channels,
                kernel: [3, 1, 1],
                groups: 1,
            };
            let p = format!("temporal{sn}");
            let input = cur.clone();
            let mut x = push(LayerSpec::new(format!("{p}.split"), LayerKind::SplitTime, &[&input]), &p, &mut layers);
            x = push(
                LayerSpec::new(
                    format!("{p}.conv"),
                    LayerKind::Conv {
                        in_channels: channels,
                        out_channels: channels,
                        kernel: tb.kernel.to_vec(),
                        stride: vec![1, 1, 1],
                        padding: vec![1, 0, 0],
                        groups: tb.groups,
                        bias: true,
                    },
                    &[&x],
                ),
                &p,
                &mut layers,
            );
            x = push(bn(format!("{p}.bn"), channels, 3, &x), &p, &mut layers);
            if cfg.residual_temporal_block {
                let id = push(LayerSpec::new(format!("{p}.skip_split"), LayerKind::SplitTime, &[&input]), &p, &mut layers);
                x = push(LayerSpec::new(format!("{p}.add"), LayerKind::Add, &[&x, &id]), &p, &mut layers);
            }
            x = push(relu(format!("{p}.relu"), &x), &p, &mut layers);
            cur = push(LayerSpec::new(format!("{p}.merge"), LayerKind::MergeTime, &[&x]), &p, &mut layers);
            temporal_blocks.push(tb);
        }
    }

    cur = push(LayerSpec::new("gap", LayerKind::GlobalPool { pool: PoolKind::Avg }, &[&cur]), "head", &mut layers);
    let output = match cfg.head {
        HeadKind::Txn => {
            cur = push(LayerSpec::new("to_sequence", LayerKind::SegmentsToSequence, &[&cur]), "head", &mut layers);
            let (txn, out, dim) = txn_layers("head", &cfg.txn, &cur, channels)?;
            for l in txn {
                push(l, "head", &mut layers);
            }
            push(
                LayerSpec::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: dim,
                        out_features: cfg.num_classes,
                    },
                    &[&out],
                ),
                "head",
                &mut layers,
            )
        }
        HeadKind::SegmentMean => {
            cur = push(
                LayerSpec::new(
                    "fc",
                    LayerKind::Linear {
                        in_features: channels,
                        out_features: cfg.num_classes,
                    },
                    &[&cur],
                ),
                "head",
                &mut layers,
            );
            push(LayerSpec::new("segment_mean", LayerKind::SegmentMean, &[&cur]), "head", &mut layers)
        }
    };

    let graph = ModelGraph {
        layers,
        output,
        bn: cfg.bn,
    };
    graph.validate()?;
    Ok(StNetGraph {
        config: cfg.clone(),
        temporal_blocks,
        graph,
    })
}

/// Initializes an StNet graph.
///
/// * Conv1 is the inflation of a 3-channel 2-D stem (from `base2d`, else He-uniform).
/// * 1-D/3-D batch norm starts as the identity.
/// * 1-D/3-D conv weights are all `1/(3*C_i)` with zero bias.
/// * Remaining 2-D layers come from `base2d` when given, else He-uniform.
pub fn init_stnet_params<S: Scalar>(g: &StNetGraph, rng: RngStream, base2d: Option<&ParamSet<S>>) -> Result<ParamSet<S>> {
    let mut params = g.graph.init_params::<S>(rng.named("layers"));
    let stem = g.graph.layer(STEM_CONV).expect("stem exists");
    let LayerKind::Conv {
        out_channels, kernel, ..
    } = &stem.kind
    else {
        unreachable!("stem is a convolution")
    };
    let w2d_shape = [*out_channels, 3, kernel[0], kernel[1]];
    let w2d = match base2d {
        Some(base) => {
            let w = base.get(&format!("{STEM_CONV}.weight"))?;
            if w.shape() != w2d_shape {
                return Err(Error::shape(
                    "init_stnet_params",
                    format!("base stem weight has shape {:?}, expected {:?}", w.shape(), w2d_shape),
                ));
            }
            w.clone()
        }
        None => {
            let mut r = rng.named("stem2d").rng();
            crate::graph::he_uniform(&w2d_shape, 3 * kernel[0] * kernel[1], &mut r)
        }
    };
    *params.get_mut(&format!("{STEM_CONV}.weight"))? = inflate_conv1_weights(&w2d, g.config.n_frames)?;

    if let Some(base) = base2d {
        for l in &g.graph.layers {
            let is_2d = match &l.kind {
                LayerKind::Conv { kernel, .. } => kernel.len() == 2,
                LayerKind::BatchNorm { rank, .. } => *rank == 2,
                _ => false,
            };
            if !is_2d || l.name == STEM_CONV {
                continue;
            }
            for slot in l.param_slots() {
                let t = base.get(&slot.name)?;
                if t.shape() != slot.shape.as_slice() {
                    return Err(Error::shape(
                        "init_stnet_params",
                        format!("base `{}` has shape {:?}, expected {:?}", slot.name, t.shape(), slot.shape),
                    ));
                }
                *params.get_mut(&slot.name)? = t.clone();
            }
        }
    }
    Ok(params)
}

fn clip_inputs<S: Scalar>(g: &StNetGraph, batch: &SuperImageBatch<S>) -> Result<Inputs<S>> {
    let c = batch.clips.shape().get(2).copied().unwrap_or(0);
    let expected = 3 * g.config.n_frames;
    if batch.clips.rank() != 5 || c != expected {
        return Err(Error::Dim {
            op: "forward_stnet",
            dim: "super-image channels (3N)",
            expected,
            got: c,
        });
    }
    Ok(BTreeMap::from([(CLIPS_INPUT.to_string(), batch.clips.clone())]))
}

/// Runs the graph on a clip batch; logits are `[B, K]`. Any `T >= 1` is accepted.
pub fn forward_stnet<S: Scalar>(g: &StNetGraph, params: &ParamSet<S>, batch: &SuperImageBatch<S>, mode: Mode, opts: ExecOptions) -> Result<Forward<S>> {
    let inputs = clip_inputs(g, batch)?;
    g.graph.forward(params, &inputs, mode, opts)
}

/// Eval-mode logits of the TSN-style baseline graph.
pub fn tsn_baseline_forward<S: Scalar>(g: &StNetGraph, params: &ParamSet<S>, batch: &SuperImageBatch<S>) -> Result<Tensor<S>> {
    if g.config.head != HeadKind::SegmentMean || !g.temporal_blocks.is_empty() {
        return Err(Error::invalid("tsn_baseline_forward needs a graph without temporal blocks and with a segment-mean head"));
    }
    let f = forward_stnet(g, params, batch, Mode::Eval, ExecOptions::default())?;
    Ok(f.logits().clone())
}

impl StNetGraph {
    /// Description with activation shapes for a `[1, T, 3N, H, W]` clip.
    pub fn describe(&self, segments: usize, height: usize, width: usize) -> Result<StNetDescription> {
        let shapes = BTreeMap::from([(
            CLIPS_INPUT.to_string(),
            vec![1, segments, 3 * self.config.n_frames, height, width],
        )]);
        Ok(StNetDescription {
            temporal_blocks: self
                .temporal_blocks
                .iter()
                .map(|t| TemporalBlockReport {
                    insert_after_stage: t.insert_after_stage,
                    channels: t.out_channels,
                    kernel: t.kernel,
                    groups: t.groups,
                    params: t.param_count(),
                })
                .collect(),
            graph: self.graph.describe(Some(&shapes))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalBlockReport {
    pub insert_after_stage: usize,
    pub channels: usize,
    pub kernel: [usize; 3],
    pub groups: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StNetDescription {
    pub temporal_blocks: Vec<TemporalBlockReport>,
    #[serde(flatten)]
    pub graph: Description,
}

impl StNetDescription {
    pub fn to_text(&self) -> String {
        let mut s = self.graph.to_text();
        s.push_str("\ntemporal blocks:\n");
        for t in &self.temporal_blocks {
            s.push_str(&format!(
                "  after stage {}: Conv3d({}, {:?}, groups {}) + BN3d + ReLU, {} params\n",
                t.insert_after_stage, t.channels, t.kernel, t.groups, t.params
            ));
        }
        s
    }
}
