//! Temporal Xception (TXN) sequence encoder and the iTXN early+late multimodal fusion model.
//!
//! A TXN block maps `[B, C_in, T]` to `[B, C_out]`: an optional pointwise bottleneck
//! (conv, BN, ReLU), then residual separable units (depthwise temporal conv, pointwise
//! conv, BN, add shortcut, ReLU), then a global temporal pool.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{resample_indices, ExecOptions, Forward, InputKind, Inputs, LayerKind, LayerSpec, ModelGraph};
use crate::kernels::{BnConfig, Mode, PoolKind};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupsMode {
    #[default]
    Depthwise,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalHead {
    #[default]
    Max,
    Mean,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnUnitCfg {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub groups_mode: GroupsMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TxnBlockCfg {
    pub bottleneck_channels: Option<usize>,
    pub units: Vec<TxnUnitCfg>,
    pub head: TemporalHead,
}

impl Default for TxnBlockCfg {
    fn default() -> Self {
        TxnBlockCfg::with_widths(&[32, 32])
    }
}

impl TxnBlockCfg {
    /// Depthwise `k=3` units with the given output widths, no bottleneck, max head.
    pub fn with_widths(widths: &[usize]) -> Self {
        TxnBlockCfg {
            bottleneck_channels: None,
            units: widths
                .iter()
                .map(|&out_channels| TxnUnitCfg {
                    out_channels,
                    kernel_size: 3,
                    groups_mode: GroupsMode::Depthwise,
                })
                .collect(),
            head: TemporalHead::Max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::invalid("txn block needs at least one unit"));
        }
        if self.bottleneck_channels == Some(0) {
            return Err(Error::invalid("txn bottleneck_channels must be positive"));
        }
        for (i, u) in self.units.iter().enumerate() {
            if u.out_channels == 0 {
                return Err(Error::invalid(format!("txn unit {} has zero out_channels", i + 1)));
            }
            if u.kernel_size % 2 == 0 {
                return Err(Error::invalid(format!("txn unit {} kernel_size {} must be odd", i + 1, u.kernel_size)));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.units.last().map_or(0, |u| u.out_channels)
    }

    /// Closed-form trainable parameter count for `in_channels` inputs.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let mut c = in_channels;
        let mut n = 0;
        if let Some(b) = self.bottleneck_channels {
            n += c * b + 2 * b;
            c = b;
        }
        for u in &self.units {
            let g = match u.groups_mode {
                GroupsMode::Depthwise => c,
                GroupsMode::Full => 1,
            };
            n += c * (c / g) * u.kernel_size + c;
            n += c * u.out_channels + 2 * u.out_channels;
            if c != u.out_channels {
                n += c * u.out_channels + u.out_channels;
            }
            c = u.out_channels;
        }
        n
    }
}

fn conv1d(name: String, cin: usize, cout: usize, k: usize, groups: usize, bias: bool, input: &str) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel: vec![k],
            stride: vec![1],
            padding: vec![k / 2],
            groups,
            bias,
        },
        &[input],
    )
}

/// Layers of a TXN block reading `input` (`[B, in_channels, T]`).
/// Returns the layers, the name of the pooled output and its width.
pub fn txn_layers(prefix: &str, cfg: &TxnBlockCfg, input: &str, in_channels: usize) -> Result<(Vec<LayerSpec>, String, usize)> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut cur = input.to_string();
    let mut c = in_channels;
    let add = |l: LayerSpec, layers: &mut Vec<LayerSpec>| -> String {
        let n = l.name.clone();
        layers.push(l);
        n
    };
    if let Some(b) = cfg.bottleneck_channels {
        let p = format!("{prefix}.bottleneck");
        cur = add(conv1d(format!("{p}.conv"), c, b, 1, 1, false, &cur), &mut layers);
        cur = add(LayerSpec::new(format!("{p}.bn"), LayerKind::BatchNorm { channels: b, rank: 1 }, &[&cur]), &mut layers);
        cur = add(LayerSpec::new(format!("{p}.relu"), LayerKind::Relu, &[&cur]), &mut layers);
        c = b;
    }
    for (i, u) in cfg.units.iter().enumerate() {
        let p = format!("{prefix}.unit{}", i + 1);
        let groups = match u.groups_mode {
            GroupsMode::Depthwise => c,
            GroupsMode::Full => 1,
        };
        let input = cur.clone();
        let mut x = add(conv1d(format!("{p}.dw"), c, c, u.kernel_size, groups, true, &input), &mut layers);
        x = add(conv1d(format!("{p}.pw"), c, u.out_channels, 1, 1, false, &x), &mut layers);
        x = add(
            LayerSpec::new(format!("{p}.bn"), LayerKind::BatchNorm { channels: u.out_channels, rank: 1 }, &[&x]),
            &mut layers,
        );
        let shortcut = if c != u.out_channels {
            add(conv1d(format!("{p}.proj"), c, u.out_channels, 1, 1, true, &input), &mut layers)
        } else {
            input
        };
        x = add(LayerSpec::new(format!("{p}.add"), LayerKind::Add, &[&x, &shortcut]), &mut layers);
        cur = add(LayerSpec::new(format!("{p}.relu"), LayerKind::Relu, &[&x]), &mut layers);
        c = u.out_channels;
    }
    let pool = match cfg.head {
        TemporalHead::Max => PoolKind::Max,
        TemporalHead::Mean => PoolKind::Avg,
    };
    let out = add(LayerSpec::new(format!("{prefix}.pool"), LayerKind::GlobalPool { pool }, &[&cur]), &mut layers);
    Ok((layers, out, c))
}

/// Standalone TXN graph over one `[B, in_channels, T]` input named `seq`; output `[B, C_out]`.
pub fn txn_graph(cfg: &TxnBlockCfg, in_channels: usize) -> Result<ModelGraph> {
    let mut layers = vec![LayerSpec::new(
        "seq",
        LayerKind::Input {
            input: InputKind::Sequence,
            channels: in_channels,
        },
        &[],
    )];
    let (txn, out, _) = txn_layers("txn", cfg, "seq", in_channels)?;
    layers.extend(txn);
    let g = ModelGraph {
        layers,
        output: out,
        bn: BnConfig::default(),
    };
    g.validate()?;
    Ok(g)
}

/// Eval-mode TXN block on a single `[C_in, T]` sequence; parameters are named `txn.*`.
pub fn txn_block_forward<S: Scalar>(cfg: &TxnBlockCfg, params: &ParamSet<S>, seq: &Tensor<S>) -> Result<Tensor<S>> {
    if seq.rank() != 2 {
        return Err(Error::shape("txn_block_forward", format!("expected [C_in, T], got {:?}", seq.shape())));
    }
    let g = txn_graph(cfg, seq.shape()[0])?;
    let x = seq.clone().reshape(&[1, seq.shape()[0], seq.shape()[1]])?;
    let f = g.forward(params, &BTreeMap::from([("seq".to_string(), x)]), Mode::Eval, ExecOptions::default())?;
    let y = f.logits();
    y.clone().reshape(&[y.len()])
}

/// Modality roles of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    FlowA,
    FlowB,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::FlowA, Modality::FlowB, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::FlowA => "flow_a",
            Modality::FlowB => "flow_b",
            Modality::Audio => "audio",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality `{s}` (valid: rgb, flow_a, flow_b, audio)")))
    }
}

/// Nearest-index resampling of `[T_m, d]` to `[target, d]`: row `t` is `floor(t*T_m/target)`.
pub fn resample_sequence<S: Scalar>(seq: &Tensor<S>, target: usize) -> Result<Tensor<S>> {
    if seq.rank() != 2 {
        return Err(Error::shape("resample_sequence", format!("expected [T, d], got {:?}", seq.shape())));
    }
    if target == 0 {
        return Err(Error::invalid("resample_sequence target length must be positive"));
    }
    Ok(seq.select_rows(&resample_indices(seq.shape()[0], target)))
}

/// Per-modality feature sequences, each `[T_m, d_m]`. Any subset of roles may be present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModalityBundle {
    seqs: BTreeMap<Modality, Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqDims {
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
}

impl ModalityBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, m: Modality, seq: Tensor<f32>) -> Result<()> {
        if seq.rank() != 2 {
            return Err(Error::shape("modality bundle", format!("{m} must be [T, d], got {:?}", seq.shape())));
        }
        self.seqs.insert(m, seq);
        Ok(())
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor<f32>> {
        self.seqs.get(&m)
    }

    pub fn get_mut(&mut self, m: Modality) -> Option<&mut Tensor<f32>> {
        self.seqs.get_mut(&m)
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.seqs.keys().copied()
    }

    pub fn dims(&self) -> BTreeMap<Modality, SeqDims> {
        self.seqs
            .iter()
            .map(|(&m, t)| (m, SeqDims { t: t.shape()[0], d: t.shape()[1] }))
            .collect()
    }

    /// Writes `manifest.json` (`{modality: {T, d}}`) and one f32 LE blob per modality.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (m, t) in &self.seqs {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(format!("{m}.bin")), bytes)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.dims())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let dims: BTreeMap<Modality, SeqDims> = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut b = ModalityBundle::new();
        for (m, d) in dims {
            let path = dir.join(format!("{m}.bin"));
            let bytes = fs::read(&path)?;
            if bytes.len() != 4 * d.t * d.d || d.t == 0 || d.d == 0 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    detail: format!("T={} d={} needs {} bytes, found {}", d.t, d.d, 4 * d.t * d.d, bytes.len()),
                });
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            b.insert(m, Tensor::new(vec![d.t, d.d], data)?)?;
        }
        Ok(b)
    }
}

/// Sequence classifier over modality inputs: iTXN, or a single-modality TXN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItxnGraph {
    pub dims: BTreeMap<Modality, usize>,
    pub early_fusion: bool,
    pub cfg: TxnBlockCfg,
    pub num_classes: usize,
    pub graph: ModelGraph,
}

fn input_layer(m: Modality, d: usize) -> LayerSpec {
    LayerSpec::new(
        m.name(),
        LayerKind::Input {
            input: InputKind::Sequence,
            channels: d,
        },
        &[],
    )
    .in_block("input")
}

/// iTXN: a late TXN branch per modality plus an early TXN branch over the
/// channel concatenation of all (length-aligned) modalities, concatenated into a linear classifier.
pub fn build_itxn(dims: &BTreeMap<Modality, usize>, cfg: &TxnBlockCfg, num_classes: usize) -> Result<ItxnGraph> {
    build_sequence_model(dims, cfg, num_classes, true)
}

/// One TXN encoder and a linear classifier over a single modality.
pub fn build_single_txn(m: Modality, d: usize, cfg: &TxnBlockCfg, num_classes: usize) -> Result<ItxnGraph> {
    build_sequence_model(&BTreeMap::from([(m, d)]), cfg, num_classes, false)
}

fn build_sequence_model(dims: &BTreeMap<Modality, usize>, cfg: &TxnBlockCfg, num_classes: usize, early: bool) -> Result<ItxnGraph> {
    if dims.is_empty() {
        return Err(Error::invalid("iTXN needs at least one modality"));
    }
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be at least 1"));
    }
    if let Some((m, _)) = dims.iter().find(|(_, &d)| d == 0) {
        return Err(Error::invalid(format!("modality {m} has zero feature dim")));
    }
    let mut layers: Vec<LayerSpec> = dims.iter().map(|(&m, &d)| input_layer(m, d)).collect();
    let mut feats = Vec::new();
    let mut width = 0;
    for (&m, &d) in dims {
        let block = format!("late.{m}");
        let (l, out, c) = txn_layers(&block, cfg, m.name(), d)?;
        layers.extend(l.into_iter().map(|x| x.in_block(block.clone())));
        feats.push(out);
        width += c;
    }
    if early {
        let names: Vec<&str> = dims.keys().map(|m| m.name()).collect();
        layers.push(LayerSpec::new("early.concat", LayerKind::TemporalConcat { target_len: None }, &names).in_block("early"));
        let (l, out, c) = txn_layers("early", cfg, "early.concat", dims.values().sum())?;
        layers.extend(l.into_iter().map(|x| x.in_block("early")));
        feats.push(out);
        width += c;
    }
    let head_in = if feats.len() == 1 {
        feats[0].clone()
    } else {
        let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
        layers.push(LayerSpec::new("fusion.concat", LayerKind::Concat, &refs).in_block("head"));
        "fusion.concat".to_string()
    };
    layers.push(
        LayerSpec::new(
            "fc",
            LayerKind::Linear {
                in_features: width,
                out_features: num_classes,
            },
            &[&head_in],
        )
        .in_block("head"),
    );
    let graph = ModelGraph {
        layers,
        output: "fc".into(),
        bn: BnConfig::default(),
    };
    graph.validate()?;
    Ok(ItxnGraph {
        dims: dims.clone(),
        early_fusion: early,
        cfg: cfg.clone(),
        num_classes,
        graph,
    })
}

impl ItxnGraph {
    /// Width of the classifier input.
    pub fn feature_dim(&self) -> usize {
        let n = self.dims.len() + usize::from(self.early_fusion);
        n * self.cfg.out_channels()
    }

    pub fn early_input_dim(&self) -> Option<usize> {
        self.early_fusion.then(|| self.dims.values().sum())
    }

    /// Closed-form trainable parameter count.
    pub fn closed_form_params(&self) -> usize {
        let late: usize = self.dims.values().map(|&d| self.cfg.param_count(d)).sum();
        let early = self.early_input_dim().map_or(0, |d| self.cfg.param_count(d));
        late + early + (self.feature_dim() + 1) * self.num_classes
    }

    /// Stacks bundles into `[B, d_m, T_m]` inputs; all bundles must share each `T_m`.
    pub fn inputs<S: Scalar>(&self, bundles: &[&ModalityBundle]) -> Result<Inputs<S>> {
        if bundles.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let missing: Vec<String> = self
            .dims
            .keys()
            .filter(|k| bundles.iter().any(|b| b.get(**k).is_none()))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("bundle is missing modalities required by the graph: {}", missing.join(", "))));
        }
        let mut out = Inputs::new();
        for (&m, &d) in &self.dims {
            let t = bundles[0].get(m).expect("checked").shape()[0];
            let mut data = Vec::with_capacity(bundles.len() * d * t);
            for b in bundles {
                let s = b.get(m).expect("checked");
                if s.shape() != [t, d] {
                    return Err(Error::shape(
                        "itxn inputs",
                        format!("{m} expects [{t}, {d}] across the batch, got {:?}", s.shape()),
                    ));
                }
                let x = s.data();
                for c in 0..d {
                    data.extend((0..t).map(|i| S::from_f64(x[i * d + c] as f64)));
                }
            }
            out.insert(m.name().to_string(), Tensor::new(vec![bundles.len(), d, t], data)?);
        }
        Ok(out)
    }

    pub fn forward_batch<S: Scalar>(&self, params: &ParamSet<S>, bundles: &[&ModalityBundle], mode: Mode, opts: ExecOptions) -> Result<Forward<S>> {
        let inputs = self.inputs(bundles)?;
        self.graph.forward(params, &inputs, mode, opts)
    }
}

/// Logits `[K]` for one bundle.
pub fn itxn_forward<S: Scalar>(g: &ItxnGraph, params: &ParamSet<S>, bundle: &ModalityBundle, mode: Mode) -> Result<Tensor<S>> {
    let f = g.forward_batch(params, &[bundle], mode, ExecOptions::default())?;
    let y = f.logits();
    y.clone().reshape(&[y.len()])
}
