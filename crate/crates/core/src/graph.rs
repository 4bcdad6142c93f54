//! Declarative model graphs.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s; every layer names its
//! inputs, which must be defined earlier in the list, so the list order is a
//! topological order of the DAG. The same description drives shape inference,
//! parameter accounting, initialization and execution on a [`Tape`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::batchnorm::{identity_running_var, BnConfig, Mode};
use crate::kernels::{ConvParams, PoolKind};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `[B, T, C, H, W]` super-image clips.
    Clips,
    /// `[B, C, T]` feature sequences.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        input: InputKind,
        channels: usize,
    },
    /// `[B, T, C, H, W] -> [B*T, C, H, W]`; fixes the segment count for later layers.
    MergeSegments,
    /// `[B*T, C, H, W] -> [B, C, T, H, W]`.
    SplitTime,
    /// `[B, C, T, H, W] -> [B*T, C, H, W]`.
    MergeTime,
    /// `[B*T, C] -> [B, C, T]`.
    SegmentsToSequence,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        rank: usize,
    },
    Relu,
    Add,
    Pool {
        pool: PoolKind,
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    /// Reduces all trailing axes: `[B, C, *S] -> [B, C]`.
    GlobalPool {
        pool: PoolKind,
    },
    /// Concatenation along axis 1.
    Concat,
    /// Resamples `[B, C_i, T_i]` inputs to a common length, then concatenates channels.
    TemporalConcat {
        target_len: Option<usize>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// `[B*T, K] -> [B, K]`, averaging over segments.
    SegmentMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    /// Logical block this layer belongs to (e.g. `stage3`, `temporal3`, `head`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub output: String,
    #[serde(default)]
    pub bn: BnConfig,
}

/// Parameter slot of a layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    /// Running statistics are state, not trainable parameters.
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            block: None,
        }
    }

    pub fn in_block(mut self, block: impl Into<String>) -> Self {
        self.block = Some(block.into());
        self
    }

    /// Type label used for grouping (`conv2d`, `batchnorm3d`, `linear`, ...).
    pub fn type_label(&self) -> String {
        match &self.kind {
            LayerKind::Conv { kernel, .. } => format!("conv{}d", kernel.len()),
            LayerKind::BatchNorm { rank, .. } => format!("batchnorm{rank}d"),
            LayerKind::Linear { .. } => "linear".into(),
            LayerKind::Input { .. } => "input".into(),
            LayerKind::MergeSegments => "merge_segments".into(),
            LayerKind::SplitTime => "split_time".into(),
            LayerKind::MergeTime => "merge_time".into(),
            LayerKind::SegmentsToSequence => "segments_to_sequence".into(),
            LayerKind::Relu => "relu".into(),
            LayerKind::Add => "add".into(),
            LayerKind::Pool { pool, .. } => format!("{pool:?}_pool").to_lowercase(),
            LayerKind::GlobalPool { pool } => format!("global_{pool:?}_pool").to_lowercase(),
            LayerKind::Concat => "concat".into(),
            LayerKind::TemporalConcat { .. } => "temporal_concat".into(),
            LayerKind::SegmentMean => "segment_mean".into(),
        }
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let slot = |suffix: &str, shape: Vec<usize>, trainable: bool| ParamSlot {
            name: format!("{}.{suffix}", self.name),
            shape,
            trainable,
        };
        match &self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                groups,
                bias,
                ..
            } => {
                let mut w = vec![*out_channels, in_channels / groups];
                w.extend_from_slice(kernel);
                let mut v = vec![slot("weight", w, true)];
                if *bias {
                    v.push(slot("bias", vec![*out_channels], true));
                }
                v
            }
            LayerKind::BatchNorm { channels, .. } => vec![
                slot("gamma", vec![*channels], true),
                slot("beta", vec![*channels], true),
                slot("running_mean", vec![*channels], false),
                slot("running_var", vec![*channels], false),
            ],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![
                slot("weight", vec![*in_features, *out_features], true),
                slot("bias", vec![*out_features], true),
            ],
            _ => vec![],
        }
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.param_slots().iter().filter(|s| s.trainable).map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

/// Runtime inputs keyed by input-layer name.
pub type Inputs<S> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Copy, Debug, Default)]
pub struct ExecOptions {
    /// Record parameters as differentiable leaves.
    pub trainable: bool,
    /// Fail with the layer name as soon as a layer emits a non-finite value.
    pub check_finite: bool,
}

/// A completed forward pass.
pub struct Forward<S> {
    pub tape: Tape<S>,
    pub outputs: BTreeMap<String, Var>,
    pub params: BTreeMap<String, Var>,
    pub logits: Var,
    /// Updated running statistics (train mode): `(layer, mean, var)`.
    pub running: Vec<(String, Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Forward<S> {
    pub fn value(&self, layer: &str) -> Result<&Tensor<S>> {
        let v = self.outputs.get(layer).ok_or_else(|| Error::invalid(format!("no layer named `{layer}`")))?;
        Ok(self.tape.value(*v))
    }

    pub fn logits(&self) -> &Tensor<S> {
        self.tape.value(self.logits)
    }

    /// Writes the updated running statistics back into `params`.
    pub fn commit_running(&self, params: &mut ParamSet<S>) -> Result<()> {
        for (layer, m, v) in &self.running {
            *params.get_mut(&format!("{layer}.running_mean"))? = m.clone();
            *params.get_mut(&format!("{layer}.running_var"))? = v.clone();
        }
        Ok(())
    }
}

fn conv_params(kind: &LayerKind) -> Option<ConvParams> {
    match kind {
        LayerKind::Conv {
            stride, padding, groups, ..
        } => Some(ConvParams {
            stride: stride.clone(),
            padding: padding.clone(),
            groups: *groups,
        }),
        _ => None,
    }
}

/// Indices picked by nearest-index resampling: `floor(t * len / target)`.
pub fn resample_indices(len: usize, target: usize) -> Vec<usize> {
    (0..target).map(|t| t * len / target).collect()
}

impl ModelGraph {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn input_layers(&self) -> impl Iterator<Item = (&LayerSpec, InputKind, usize)> {
        self.layers.iter().filter_map(|l| match l.kind {
            LayerKind::Input { input, channels } => Some((l, input, channels)),
            _ => None,
        })
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        self.layers.iter().flat_map(LayerSpec::param_slots).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Maps every parameter name to the type label of its layer.
    pub fn param_types(&self) -> BTreeMap<String, String> {
        self.layers
            .iter()
            .flat_map(|l| l.param_slots().into_iter().map(move |s| (s.name, l.type_label())))
            .collect()
    }

    /// Checks names, input references and topological order.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            for i in &l.inputs {
                if !seen.contains(i.as_str()) {
                    return Err(Error::invalid(format!("layer `{}` reads `{i}` before it is defined", l.name)));
                }
            }
            let arity_ok = match &l.kind {
                LayerKind::Input { .. } => l.inputs.is_empty(),
                LayerKind::Add => l.inputs.len() == 2,
                LayerKind::Concat | LayerKind::TemporalConcat { .. } => !l.inputs.is_empty(),
                _ => l.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::invalid(format!("layer `{}` has {} inputs", l.name, l.inputs.len())));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name `{}`", l.name)));
            }
        }
        if !seen.contains(self.output.as_str()) {
            return Err(Error::invalid(format!("output layer `{}` does not exist", self.output)));
        }
        Ok(())
    }

    /// Checks that `params` holds exactly the graph's slots with the right shapes.
    pub fn check_params<S: Scalar>(&self, params: &ParamSet<S>) -> Result<()> {
        for slot in self.param_slots() {
            let t = params.get(&slot.name)?;
            if t.shape() != slot.shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("`{}` has shape {:?}, graph expects {:?}", slot.name, t.shape(), slot.shape),
                ));
            }
        }
        Ok(())
    }

    /// Runs the graph on `inputs`.
    pub fn forward<S: Scalar>(&self, params: &ParamSet<S>, inputs: &Inputs<S>, mode: Mode, opts: ExecOptions) -> Result<Forward<S>> {
        let mut tape = Tape::new();
        let mut outs: BTreeMap<String, Var> = BTreeMap::new();
        let mut pvars: BTreeMap<String, Var> = BTreeMap::new();
        let mut running = Vec::new();
        let mut segments: Option<usize> = None;

        let pv = |tape: &mut Tape<S>, pvars: &mut BTreeMap<String, Var>, name: String| -> Result<Var> {
            let t = params.get(&name)?.clone();
            let v = if opts.trainable { tape.param(t) } else { tape.constant(t) };
            pvars.insert(name, v);
            Ok(v)
        };

        for l in &self.layers {
            let arg = |i: usize| -> Result<Var> {
                let name = &l.inputs[i];
                outs.get(name).copied().ok_or_else(|| Error::MissingInput(name.clone()))
            };
            let v = match &l.kind {
                LayerKind::Input { input, channels } => {
                    let t = inputs.get(&l.name).ok_or_else(|| Error::MissingInput(l.name.clone()))?;
                    let (rank, axis, what) = match input {
                        InputKind::Clips => (5, 2, "super-image channels (3N)"),
                        InputKind::Sequence => (3, 1, "feature channels"),
                    };
                    if t.rank() != rank {
                        return Err(Error::shape(
                            "input",
                            format!("`{}` expects rank {rank}, got shape {:?}", l.name, t.shape()),
                        ));
                    }
                    if t.shape()[axis] != *channels {
                        return Err(Error::Dim {
                            op: "input",
                            dim: what,
                            expected: *channels,
                            got: t.shape()[axis],
                        });
                    }
                    tape.constant(t.clone())
                }
                LayerKind::MergeSegments => {
                    let x = arg(0)?;
                    let s = tape.value(x).shape().to_vec();
                    segments = Some(s[1]);
                    tape.reshape(x, &[s[0] * s[1], s[2], s[3], s[4]])?
                }
                LayerKind::SplitTime => {
                    let x = arg(0)?;
                    let t = segments.ok_or_else(|| Error::invalid("split_time before merge_segments"))?;
                    let s = tape.value(x).shape().to_vec();
                    let r = tape.reshape(x, &[s[0] / t, t, s[1], s[2], s[3]])?;
                    tape.permute(r, &[0, 2, 1, 3, 4])?
                }
                LayerKind::MergeTime => {
                    let x = arg(0)?;
                    let p = tape.permute(x, &[0, 2, 1, 3, 4])?;
                    let s = tape.value(p).shape().to_vec();
                    tape.reshape(p, &[s[0] * s[1], s[2], s[3], s[4]])?
                }
                LayerKind::SegmentsToSequence => {
                    let x = arg(0)?;
                    let t = segments.ok_or_else(|| Error::invalid("segments_to_sequence before merge_segments"))?;
                    let s = tape.value(x).shape().to_vec();
                    let r = tape.reshape(x, &[s[0] / t, t, s[1]])?;
                    tape.permute(r, &[0, 2, 1])?
                }
                LayerKind::Conv { bias, .. } => {
                    let x = arg(0)?;
                    let w = pv(&mut tape, &mut pvars, format!("{}.weight", l.name))?;
                    let b = if *bias {
                        Some(pv(&mut tape, &mut pvars, format!("{}.bias", l.name))?)
                    } else {
                        None
                    };
                    tape.conv(x, w, b, conv_params(&l.kind).expect("conv layer"))?
                }
                LayerKind::BatchNorm { .. } => {
                    let x = arg(0)?;
                    let g = pv(&mut tape, &mut pvars, format!("{}.gamma", l.name))?;
                    let b = pv(&mut tape, &mut pvars, format!("{}.beta", l.name))?;
                    let rm = params.get(&format!("{}.running_mean", l.name))?;
                    let rv = params.get(&format!("{}.running_var", l.name))?;
                    let (y, upd) = tape.batchnorm(x, g, b, (rm, rv), mode, self.bn)?;
                    if let Some((m, v)) = upd {
                        running.push((l.name.clone(), m, v));
                    }
                    y
                }
                LayerKind::Relu => {
                    let x = arg(0)?;
                    tape.relu(x)
                }
                LayerKind::Add => {
                    let (a, b) = (arg(0)?, arg(1)?);
                    tape.add(a, b)?
                }
                LayerKind::Pool { pool, window, stride } => {
                    let x = arg(0)?;
                    tape.pool(x, *pool, window, stride)?
                }
                LayerKind::GlobalPool { pool } => {
                    let x = arg(0)?;
                    tape.global_pool(x, *pool)?
                }
                LayerKind::Concat => {
                    let parts = (0..l.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                    tape.concat(&parts)?
                }
                LayerKind::TemporalConcat { target_len } => {
                    let parts = (0..l.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                    let lens: Vec<usize> = parts.iter().map(|&p| tape.value(p).shape()[2]).collect();
                    let target = target_len.unwrap_or_else(|| lens.iter().copied().max().unwrap_or(1));
                    let mut aligned = Vec::with_capacity(parts.len());
                    for (&p, &len) in parts.iter().zip(&lens) {
                        aligned.push(if len == target {
                            p
                        } else {
                            tape.resample(p, &resample_indices(len, target))?
                        });
                    }
                    tape.concat(&aligned)?
                }
                LayerKind::Linear { .. } => {
                    let x = arg(0)?;
                    let w = pv(&mut tape, &mut pvars, format!("{}.weight", l.name))?;
                    let b = pv(&mut tape, &mut pvars, format!("{}.bias", l.name))?;
                    tape.linear(x, w, b)?
                }
                LayerKind::SegmentMean => {
                    let x = arg(0)?;
                    let t = segments.ok_or_else(|| Error::invalid("segment_mean before merge_segments"))?;
                    tape.segment_mean(x, t)?
                }
            };
            if opts.check_finite && !tape.value(v).all_finite() {
                return Err(Error::NonFinite { layer: l.name.clone() });
            }
            outs.insert(l.name.clone(), v);
        }
        let logits = *outs.get(&self.output).ok_or_else(|| Error::MissingInput(self.output.clone()))?;
        Ok(Forward {
            tape,
            outputs: outs,
            params: pvars,
            logits,
            running,
        })
    }

    /// Infers every layer's output shape for the given input shapes.
    pub fn infer_shapes(&self, inputs: &BTreeMap<String, Vec<usize>>) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut segments = None;
        for l in &self.layers {
            let ins: Vec<&Vec<usize>> = l
                .inputs
                .iter()
                .map(|i| shapes.get(i).ok_or_else(|| Error::MissingInput(i.clone())))
                .collect::<Result<_>>()?;
            let s = match &l.kind {
                LayerKind::Input { .. } => inputs.get(&l.name).cloned().ok_or_else(|| Error::MissingInput(l.name.clone()))?,
                LayerKind::MergeSegments => {
                    let s = ins[0];
                    segments = Some(s[1]);
                    vec![s[0] * s[1], s[2], s[3], s[4]]
                }
                LayerKind::SplitTime => {
                    let t = segments.unwrap_or(1);
                    let s = ins[0];
                    vec![s[0] / t, s[1], t, s[2], s[3]]
                }
                LayerKind::MergeTime => {
                    let s = ins[0];
                    vec![s[0] * s[2], s[1], s[3], s[4]]
                }
                LayerKind::SegmentsToSequence => {
                    let t = segments.unwrap_or(1);
                    vec![ins[0][0] / t, ins[0][1], t]
                }
                LayerKind::Conv { .. } => {
                    let w: Vec<usize> = l.param_slots()[0].shape.clone();
                    crate::kernels::conv::geometry(ins[0], &w, &conv_params(&l.kind).expect("conv"))?.out_shape
                }
                LayerKind::BatchNorm { .. } | LayerKind::Relu => ins[0].clone(),
                LayerKind::Add => ins[0].clone(),
                LayerKind::Pool { window, stride, .. } => {
                    let mut s = ins[0][..2].to_vec();
                    for (d, (&w, &st)) in window.iter().zip(stride).enumerate() {
                        s.push((ins[0][2 + d] - w) / st + 1);
                    }
                    s
                }
                LayerKind::GlobalPool { .. } => ins[0][..2].to_vec(),
                LayerKind::Concat => {
                    let mut s = ins[0].clone();
                    s[1] = ins.iter().map(|i| i[1]).sum();
                    s
                }
                LayerKind::TemporalConcat { target_len } => {
                    let target = target_len.unwrap_or_else(|| ins.iter().map(|i| i[2]).max().unwrap_or(1));
                    vec![ins[0][0], ins.iter().map(|i| i[1]).sum(), target]
                }
                LayerKind::Linear { out_features, .. } => vec![ins[0][0], *out_features],
                LayerKind::SegmentMean => vec![ins[0][0] / segments.unwrap_or(1), ins[0][1]],
            };
            shapes.insert(l.name.clone(), s);
        }
        Ok(shapes)
    }

    /// Default initialization: He-uniform for 2-D convolutions, the constant
    /// temporal rule (weights `1/(3*C_i)`, `C_i` = input channels per group, bias 0)
    /// for 1-D/3-D convolutions, identity batch norm, small uniform linear layers.
    pub fn init_params<S: Scalar>(&self, rng: RngStream) -> ParamSet<S> {
        let mut p = ParamSet::new();
        for (li, l) in self.layers.iter().enumerate() {
            let mut r = rng.split(li as u64).rng();
            match &l.kind {
                LayerKind::Conv {
                    in_channels,
                    groups,
                    kernel,
                    ..
                } => {
                    let slots = l.param_slots();
                    let cin_g = in_channels / groups;
                    let w = if kernel.len() == 2 {
                        let fan_in = cin_g * kernel.iter().product::<usize>();
                        he_uniform(&slots[0].shape, fan_in, &mut r)
                    } else {
                        Tensor::full(&slots[0].shape, S::ONE / S::from_usize(3 * cin_g))
                    };
                    p.insert(slots[0].name.clone(), w);
                    if let Some(b) = slots.get(1) {
                        p.insert(b.name.clone(), Tensor::zeros(&b.shape));
                    }
                }
                LayerKind::BatchNorm { channels, .. } => {
                    let c = [*channels];
                    p.insert(format!("{}.gamma", l.name), Tensor::full(&c, S::ONE));
                    p.insert(format!("{}.beta", l.name), Tensor::zeros(&c));
                    p.insert(format!("{}.running_mean", l.name), Tensor::zeros(&c));
                    p.insert(format!("{}.running_var", l.name), Tensor::full(&c, identity_running_var::<S>(self.bn.eps)));
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let bound = 1.0 / (*in_features as f64).sqrt();
                    let w = (0..in_features * out_features).map(|_| S::from_f64(r.uniform_range(-bound, bound))).collect();
                    p.insert(
                        format!("{}.weight", l.name),
                        Tensor::new(vec![*in_features, *out_features], w).expect("linear shape"),
                    );
                    p.insert(format!("{}.bias", l.name), Tensor::zeros(&[*out_features]));
                }
                _ => {}
            }
        }
        p
    }

    /// Per-layer description with parameter counts and shapes.
    pub fn describe(&self, input_shapes: Option<&BTreeMap<String, Vec<usize>>>) -> Result<Description> {
        let shapes = input_shapes.map(|s| self.infer_shapes(s)).transpose()?;
        let layers = self
            .layers
            .iter()
            .map(|l| LayerRow {
                name: l.name.clone(),
                layer_type: l.type_label(),
                block: l.block.clone(),
                params: l.param_count(),
                param_shapes: l
                    .param_slots()
                    .into_iter()
                    .filter(|s| s.trainable)
                    .map(|s| (s.name.rsplit('.').next().unwrap_or_default().to_string(), s.shape))
                    .collect(),
                output_shape: shapes.as_ref().and_then(|s| s.get(&l.name).cloned()),
            })
            .collect::<Vec<_>>();
        let mut blocks: BTreeMap<String, usize> = BTreeMap::new();
        for r in &layers {
            if let Some(b) = &r.block {
                *blocks.entry(b.clone()).or_default() += r.params;
            }
        }
        Ok(Description {
            total_params: layers.iter().map(|r| r.params).sum(),
            layers,
            block_params: blocks,
        })
    }
}

pub(crate) fn he_uniform<S: Scalar>(shape: &[usize], fan_in: usize, r: &mut crate::rng::StreamRng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::from_f64(r.uniform_range(-bound, bound))).collect()).expect("shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub layer_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
    pub params: usize,
    pub param_shapes: BTreeMap<String, Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub layers: Vec<LayerRow>,
    pub block_params: BTreeMap<String, usize>,
    pub total_params: usize,
}

impl Description {
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:<22} {:<12} {:>10}  shape", "layer", "type", "block", "params");
        for r in &self.layers {
            let shape = r
                .output_shape
                .as_ref()
                .map(|v| format!("{v:?}"))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<32} {:<22} {:<12} {:>10}  {}",
                r.name,
                r.layer_type,
                r.block.as_deref().unwrap_or("-"),
                r.params,
                shape
            );
        }
        let _ = writeln!(s, "\nparameters per block:");
        for (b, n) in &self.block_params {
            let _ = writeln!(s, "  {b:<20} {n:>10}");
        }
        let _ = writeln!(s, "total parameters: {}", self.total_params);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelGraph {
        ModelGraph {
            layers: vec![
                LayerSpec::new("x", LayerKind::Input { input: InputKind::Sequence, channels: 2 }, &[]),
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv {
                        in_channels: 2,
                        out_channels: 4,
                        kernel: vec![3],
                        stride: vec![1],
                        padding: vec![1],
                        groups: 2,
                        bias: true,
                    },
                    &["x"],
                ),
                LayerSpec::new("pool", LayerKind::GlobalPool { pool: PoolKind::Max }, &["conv"]),
                LayerSpec::new("fc", LayerKind::Linear { in_features: 4, out_features: 3 }, &["pool"]),
            ],
            output: "fc".into(),
            bn: BnConfig::default(),
        }
    }

    #[test]
    fn validate_catches_forward_reference() {
        let mut g = tiny();
        g.layers.swap(1, 2);
        assert!(g.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn param_count_closed_form() {
        let g = tiny();
        assert_eq!(g.param_count(), 4 * 3 + 4 + 4 * 3 + 3);
    }

    #[test]
    fn graph_json_roundtrip() {
        let g = tiny();
        let s = serde_json::to_string(&g).unwrap();
        let back: ModelGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn forward_and_shapes_agree() {
        let g = tiny();
        let p = g.init_params::<f64>(RngStream::new(1));
        g.check_params(&p).unwrap();
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Tensor::from_f64(&[2, 2, 5], &(0..20).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap());
        let f = g.forward(&p, &inputs, Mode::Eval, ExecOptions::default()).unwrap();
        let shapes = g.infer_shapes(&[("x".to_string(), vec![2, 2, 5])].into_iter().collect()).unwrap();
        for (name, v) in &f.outputs {
            assert_eq!(f.tape.value(*v).shape(), shapes[name].as_slice(), "{name}");
        }
    }

    #[test]
    fn resample_index_formula() {
        assert_eq!(resample_indices(4, 2), vec![0, 2]);
        assert_eq!(resample_indices(1, 3), vec![0, 0, 0]);
        assert_eq!(resample_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }
}
