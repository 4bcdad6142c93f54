//! Central finite-difference gradient checking in f64.
//!
//! For a sampled coordinate `x` the step is `h = 1e-4 * (1 + |x|)` and the error is
//! `|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`. Coordinates whose `x +- h`
//! evaluations change a ReLU sign or a max-pool winner sit on a kink; they are
//! skipped, counted, and replaced by the next sampled coordinate.
//!
//! The finite difference of a loss `f` carries rounding noise of roughly
//! `eps * |f| / h`, about 1e-12 for an O(1) loss. The reported `max_rel_err`
//! subtracts that allowance from `|g_ad - g_fd|` before dividing, so coordinates
//! whose gradient is at the noise level are not scored on noise.
//! `max_rel_err_literal` keeps the unadjusted value.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{build_itxn, ItxnGraph, Modality, ModalityBundle, TxnBlockCfg};
use crate::graph::{ExecOptions, Inputs, LayerKind, LayerSpec, ModelGraph};
use crate::kernels::{BnConfig, ConvParams, Mode, PoolKind};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::sampling::SuperImageBatch;
use crate::stnet::{build_stnet, init_stnet_params, BackboneSpec, StNetConfig, StNetGraph, StageSpec, StemSpec, CLIPS_INPUT};
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCfg {
    pub coords_per_type: usize,
    pub seed: u64,
}

impl Default for GradcheckCfg {
    fn default() -> Self {
        GradcheckCfg {
            coords_per_type: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub layer_type: String,
    pub coords: usize,
    pub kinks_skipped: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub max_rel_err_literal: f64,
    /// Coordinates with `|g_ad| + |g_fd|` within 1000x of the rounding allowance.
    pub low_signal_coords: usize,
    /// Coordinates whose exact gradient is zero by construction (a bias feeding a
    /// train-mode BN). Both estimates are rounding noise there, so they are held to
    /// an absolute bound instead of the relative one.
    pub zero_grad_coords: usize,
    pub zero_grad_max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Unadjusted relative error, zero-gradient coordinates excluded.
    pub max_rel_err_literal: f64,
    /// Unadjusted relative error over every checked coordinate, zero-gradient ones included.
    pub max_rel_err_all: f64,
    pub zero_grad_max_abs: f64,
    pub per_type: Vec<TypeReport>,
}

/// Absolute bound on both estimates at a coordinate with an exactly zero gradient.
pub const ZERO_GRAD_ATOL: f64 = 1e-9;

/// Rounding allowance of the finite difference, in units of `eps * |f| / (2h)`.
pub const FD_NOISE_ULPS: f64 = 32.0;

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.zero_grad_max_abs <= ZERO_GRAD_ATOL && self.per_type.iter().all(|t| t.coords > 0)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<20} {:>6} {:>5} {:>11} {:>11} {:>5} {:>5} {:>9}  worst\n",
            "layer type", "coords", "kinks", "max_rel_err", "literal", "low", "zero", "zero_abs"
        );
        for t in &self.per_type {
            s.push_str(&format!(
                "{:<20} {:>6} {:>5} {:>11.3e} {:>11.3e} {:>5} {:>5} {:>9.2e}  {}\n",
                t.layer_type,
                t.coords,
                t.kinks_skipped,
                t.max_rel_err,
                t.max_rel_err_literal,
                t.low_signal_coords,
                t.zero_grad_coords,
                t.zero_grad_max_abs,
                t.worst_param
            ));
        }
        s.push_str(&format!(
            "max_rel_err {:.3e} at {} (unadjusted {:.3e})\n",
            self.max_rel_err, self.worst_param, self.max_rel_err_literal
        ));
        if self.per_type.iter().any(|t| t.zero_grad_coords > 0) {
            s.push_str(&format!(
                "zero-gradient coordinates: max |g| {:.2e} (bound {:.0e}); relative error including them {:.3e}\n",
                self.zero_grad_max_abs, ZERO_GRAD_ATOL, self.max_rel_err_all
            ));
        }
        s
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-12, a.abs() + b.abs())
}

/// Builds a scalar loss on a fresh tape from `params`; returns the tape, the loss
/// node and the node of every parameter that should be checked.
pub type LossFn<'a> = dyn Fn(&ParamSet<f64>) -> Result<(Tape<f64>, Var, BTreeMap<String, Var>)> + 'a;

/// Checks the gradient of `loss_fn` for parameters grouped by `types` (name -> layer type).
/// Parameters in `zero_grad` have an exactly zero gradient by construction.
pub fn gradcheck(
    loss_fn: &LossFn<'_>,
    params: &ParamSet<f64>,
    types: &BTreeMap<String, String>,
    zero_grad: &BTreeSet<String>,
    cfg: &GradcheckCfg,
) -> Result<GradcheckReport> {
    let (tape, loss, vars) = loss_fn(params)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let mut by_type: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for (name, ty) in types {
        let n = params.get(name)?.len();
        let list = by_type.entry(ty.as_str()).or_default();
        list.extend((0..n).map(|i| (name.as_str(), i)));
    }
    let root = RngStream::new(cfg.seed).named("gradcheck");
    let mut per_type = Vec::new();
    let mut max_all = 0.0f64;
    let mut work = params.clone();
    for (ty, mut coords) in by_type {
        root.named(ty).rng().shuffle(&mut coords);
        let mut t = TypeReport {
            layer_type: ty.to_string(),
            coords: 0,
            kinks_skipped: 0,
            max_rel_err: 0.0,
            worst_param: String::new(),
            max_rel_err_literal: 0.0,
            low_signal_coords: 0,
            zero_grad_coords: 0,
            zero_grad_max_abs: 0.0,
        };
        for (name, i) in coords {
            let is_zero = zero_grad.contains(name);
            if (is_zero && t.zero_grad_coords >= cfg.coords_per_type) || (!is_zero && t.coords >= cfg.coords_per_type) {
                continue;
            }
            let x = params.get(name)?.data()[i];
            let h = 1e-4 * (1.0 + x.abs());
            let mut eval = |v: f64| -> Result<(f64, u64)> {
                work.get_mut(name)?.data_mut()[i] = v;
                let (tp, l, _) = loss_fn(&work)?;
                Ok((tp.value(l).data()[0], tp.branch_signature()))
            };
            let (fp, sp) = eval(x + h)?;
            let (fm, sm) = eval(x - h)?;
            work.get_mut(name)?.data_mut()[i] = x;
            if sp != base_sig || sm != base_sig {
                t.kinks_skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let ad = vars.get(name).and_then(|v| grads.get(*v)).map_or(0.0, |g| g.data()[i]);
            let e = rel_err(ad, fd);
            max_all = max_all.max(e);
            if is_zero {
                t.zero_grad_coords += 1;
                t.zero_grad_max_abs = t.zero_grad_max_abs.max(ad.abs()).max(fd.abs());
                continue;
            }
            let noise = FD_NOISE_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * h);
            let adjusted = ((ad - fd).abs() - noise).max(0.0) / f64::max(1e-12, ad.abs() + fd.abs());
            t.max_rel_err_literal = t.max_rel_err_literal.max(e);
            if ad.abs() + fd.abs() < 1e3 * noise {
                t.low_signal_coords += 1;
            }
            if !(adjusted <= t.max_rel_err) {
                t.max_rel_err = adjusted;
                t.worst_param = format!("{name}[{i}] ad={ad:.6e} fd={fd:.6e}");
            }
            t.coords += 1;
        }
        per_type.push(t);
    }
    let worst = per_type
        .iter()
        .fold(None::<&TypeReport>, |w, t| match w {
            Some(w) if w.max_rel_err >= t.max_rel_err => Some(w),
            _ => Some(t),
        })
        .ok_or_else(|| Error::invalid("gradcheck has no parameters to check"))?;
    Ok(GradcheckReport {
        max_rel_err: worst.max_rel_err,
        worst_param: worst.worst_param.clone(),
        max_rel_err_literal: per_type.iter().map(|t| t.max_rel_err_literal).fold(0.0, f64::max),
        max_rel_err_all: max_all,
        zero_grad_max_abs: per_type.iter().map(|t| t.zero_grad_max_abs).fold(0.0, f64::max),
        per_type,
    })
}

/// Conv biases whose output reaches only train-mode BN layers, possibly through
/// bias-free unpadded convs or time/segment reshapes. A per-channel constant shift
/// survives those layers and is removed by the batch mean, so the gradient is zero.
pub fn shift_invariant_biases(graph: &ModelGraph) -> BTreeSet<String> {
    let consumers = |name: &str| -> Vec<&LayerSpec> { graph.layers.iter().filter(|l| l.inputs.iter().any(|i| i == name)).collect() };
    fn absorbed<'a>(name: &str, consumers: &dyn Fn(&str) -> Vec<&'a LayerSpec>, output: &str) -> bool {
        let cs = consumers(name);
        name != output
            && !cs.is_empty()
            && cs.iter().all(|l| match &l.kind {
                LayerKind::BatchNorm { .. } => true,
                LayerKind::Conv { bias: false, padding, .. } if padding.iter().all(|&p| p == 0) => absorbed(&l.name, consumers, output),
                LayerKind::SplitTime | LayerKind::MergeTime => absorbed(&l.name, consumers, output),
                _ => false,
            })
    }
    graph
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv { bias: true, .. }) && absorbed(&l.name, &consumers, &graph.output))
        .map(|l| format!("{}.bias", l.name))
        .collect()
}

/// Gradcheck of a whole graph under softmax cross-entropy, grouped by layer type.
pub fn gradcheck_graph(graph: &ModelGraph, params: &ParamSet<f64>, inputs: &Inputs<f64>, labels: &[usize], mode: Mode, cfg: &GradcheckCfg) -> Result<GradcheckReport> {
    let loss_fn = |p: &ParamSet<f64>| -> Result<(Tape<f64>, Var, BTreeMap<String, Var>)> {
        let mut f = graph.forward(p, inputs, mode, ExecOptions { trainable: true, check_finite: false })?;
        let loss = f.tape.softmax_xent(f.logits, labels)?;
        Ok((f.tape, loss, f.params))
    };
    let trainable: BTreeSet<String> = graph.param_slots().into_iter().filter(|s| s.trainable).map(|s| s.name).collect();
    let mut types = graph.param_types();
    types.retain(|name, _| trainable.contains(name));
    let zero = if mode == Mode::Train { shift_invariant_biases(graph) } else { BTreeSet::new() };
    gradcheck(&loss_fn, params, &types, &zero, cfg)
}

fn randn(shape: &[usize], scale: f64, rng: &mut crate::rng::StreamRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect::<Vec<_>>()).expect("shape")
}

/// Adds `N(0, scale^2)` noise to every trainable parameter, breaking the symmetric init.
pub fn jitter_params(graph: &ModelGraph, params: &mut ParamSet<f64>, scale: f64, rng: RngStream) -> Result<()> {
    let mut r = rng.rng();
    for slot in graph.param_slots().into_iter().filter(|s| s.trainable) {
        for v in params.get_mut(&slot.name)?.data_mut() {
            *v += scale * r.normal();
        }
    }
    Ok(())
}

/// Small StNet used for gradient checks: N=2, 3 classes.
pub fn stnet_toy() -> Result<StNetGraph> {
    build_stnet(&StNetConfig {
        backbone: BackboneSpec {
            stem: StemSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            },
            stages: [(4, 1), (4, 2), (8, 1), (8, 2)]
                .into_iter()
                .map(|(channels, stride)| StageSpec { blocks: 1, channels, stride })
                .collect(),
        },
        n_frames: 2,
        num_classes: 3,
        txn: TxnBlockCfg::with_widths(&[5, 5]),
        ..StNetConfig::default()
    })
}

/// Small iTXN over all four modality roles.
pub fn itxn_toy() -> Result<ItxnGraph> {
    let dims = BTreeMap::from([(Modality::Rgb, 8), (Modality::FlowA, 6), (Modality::FlowB, 6), (Modality::Audio, 4)]);
    build_itxn(&dims, &TxnBlockCfg::with_widths(&[8, 6]), 3)
}

/// Gradcheck of the toy StNet in train mode on random clips `[4, 4, 6, 16, 16]`.
pub fn check_stnet_toy(cfg: &GradcheckCfg) -> Result<GradcheckReport> {
    let g = stnet_toy()?;
    let root = RngStream::new(cfg.seed).named("stnet_toy");
    let mut params = init_stnet_params::<f64>(&g, root.named("init"), None)?;
    jitter_params(&g.graph, &mut params, 0.5, root.named("jitter"))?;
    let mut r = root.named("data").rng();
    let batch = SuperImageBatch {
        clips: randn(&[4, 4, 6, 16, 16], 1.0, &mut r),
        labels: vec![0, 2, 1, 2],
    };
    let inputs = BTreeMap::from([(CLIPS_INPUT.to_string(), batch.clips)]);
    gradcheck_graph(&g.graph, &params, &inputs, &batch.labels, Mode::Train, cfg)
}

/// Gradcheck of the toy iTXN in train mode on random bundles with unequal lengths.
pub fn check_itxn_toy(cfg: &GradcheckCfg) -> Result<GradcheckReport> {
    let g = itxn_toy()?;
    let root = RngStream::new(cfg.seed).named("itxn_toy");
    let mut params = g.graph.init_params::<f64>(root.named("init"));
    jitter_params(&g.graph, &mut params, 0.5, root.named("jitter"))?;
    let mut r = root.named("data").rng();
    let lens = [(Modality::Rgb, 12), (Modality::FlowA, 8), (Modality::FlowB, 10), (Modality::Audio, 14)];
    let bundles: Vec<ModalityBundle> = (0..6)
        .map(|_| {
            let mut b = ModalityBundle::new();
            for (m, t) in lens {
                let d = g.dims[&m];
                let x = randn(&[t, d], 1.0, &mut r);
                b.insert(m, x.cast()).expect("rank 2");
            }
            b
        })
        .collect();
    let refs: Vec<&ModalityBundle> = bundles.iter().collect();
    let inputs = g.inputs::<f64>(&refs)?;
    gradcheck_graph(&g.graph, &params, &inputs, &[0, 1, 2, 2, 1, 0], Mode::Train, cfg)
}

struct Case {
    layer_type: &'static str,
    leaves: Vec<(&'static str, Tensor<f64>)>,
    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    zero_grad: &'static [&'static str],
}

/// Reduces any output to a scalar with fixed, irregular projection weights.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[1, n])?;
    let proj: Vec<f64> = (0..n).map(|i| (1.37 * i as f64 + 0.4).cos() + 0.2).collect();
    let w = tape.constant(Tensor::from_f64(&[n, 1], &proj)?);
    let b = tape.constant(Tensor::zeros(&[1]));
    let s = tape.linear(flat, w, b)?;
    tape.reshape(s, &[1])
}

fn conv_case(layer_type: &'static str, x: &[usize], w: &[usize], bias: bool, p: ConvParams, r: &mut crate::rng::StreamRng) -> Case {
    let mut leaves = vec![("x", randn(x, 1.0, r)), ("weight", randn(w, 0.5, r))];
    if bias {
        leaves.push(("bias", randn(&[w[0]], 0.5, r)));
    }
    Case {
        layer_type,
        leaves,
        zero_grad: &[],
        build: Box::new(move |t, v| {
            let y = t.conv(v[0], v[1], v.get(2).copied(), p.clone())?;
            project(t, y)
        }),
    }
}

fn unary_case(layer_type: &'static str, x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> Case {
    Case {
        layer_type,
        leaves: vec![("x", x)],
        zero_grad: &[],
        build: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y)
        }),
    }
}

fn bn_case(layer_type: &'static str, shape: &[usize], mode: Mode, with_relu: bool, r: &mut crate::rng::StreamRng) -> Case {
    let c = shape[1];
    let leaves = vec![
        ("x", randn(shape, 1.0, r)),
        ("gamma", Tensor::from_f64(&[c], &(0..c).map(|_| 1.0 + 0.3 * r.normal()).collect::<Vec<_>>()).expect("shape")),
        ("beta", randn(&[c], 0.3, r)),
    ];
    let rm = randn(&[c], 0.2, r);
    let rv = Tensor::from_f64(&[c], &(0..c).map(|_| 0.5 + r.uniform()).collect::<Vec<_>>()).expect("shape");
    Case {
        layer_type,
        leaves,
        zero_grad: &[],
        build: Box::new(move |t, v| {
            let (mut y, _) = t.batchnorm(v[0], v[1], v[2], (&rm, &rv), mode, BnConfig::default())?;
            if with_relu {
                y = t.relu(y);
            }
            project(t, y)
        }),
    }
}

fn suite_cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = RngStream::new(seed).named("layer_suite").rng();
    let r = &mut r;
    let mut cases = vec![
        conv_case("conv1d", &[3, 4, 14], &[5, 4, 3], true, ConvParams::padded(&[1]), r),
        conv_case("conv1d_depthwise", &[4, 6, 10], &[6, 1, 3], true, ConvParams::padded(&[1]).with_groups(6), r),
        conv_case("conv2d", &[2, 3, 5, 6], &[4, 3, 3, 3], false, ConvParams::padded(&[1, 1]), r),
        conv_case("conv2d_strided", &[2, 2, 7, 7], &[3, 2, 3, 3], true, ConvParams::padded(&[1, 1]).with_stride(&[2, 2]), r),
        conv_case("conv3d", &[2, 3, 4, 3, 3], &[3, 3, 3, 1, 1], true, ConvParams::padded(&[1, 0, 0]), r),
        bn_case("batchnorm1d_train", &[4, 5, 12], Mode::Train, false, r),
        bn_case("batchnorm2d_train", &[3, 3, 5, 5], Mode::Train, false, r),
        bn_case("batchnorm3d_train", &[2, 3, 4, 3, 3], Mode::Train, false, r),
        bn_case("batchnorm2d_eval", &[3, 3, 5, 5], Mode::Eval, false, r),
    ];
    let x = randn(&[4, 5, 12], 1.0, r);
    cases.push(unary_case("relu", x, |t, v| Ok(t.relu(v))));
    let x = randn(&[3, 4, 6, 6], 1.0, r);
    cases.push(unary_case("maxpool2d", x, |t, v| t.pool(v, PoolKind::Max, &[2, 2], &[2, 2])));
    let x = randn(&[3, 4, 5, 6], 1.0, r);
    cases.push(unary_case("avgpool2d", x, |t, v| t.pool(v, PoolKind::Avg, &[2, 2], &[1, 1])));
    let x = randn(&[4, 6, 11], 1.0, r);
    cases.push(unary_case("maxpool1d", x, |t, v| t.pool(v, PoolKind::Max, &[3], &[2])));
    let x = randn(&[4, 6, 3, 3], 1.0, r);
    cases.push(unary_case("global_avgpool", x, |t, v| t.global_pool(v, PoolKind::Avg)));
    let x = randn(&[5, 8, 6], 1.0, r);
    cases.push(unary_case("global_maxpool", x, |t, v| t.global_pool(v, PoolKind::Max)));
    let x = randn(&[2, 3, 5, 3, 3], 1.0, r);
    cases.push(unary_case("permute_reshape", x, |t, v| {
        let p = t.permute(v, &[0, 2, 1, 3, 4])?;
        t.reshape(p, &[10, 3, 3, 3])
    }));
    let x = randn(&[30, 8], 1.0, r);
    cases.push(unary_case("segment_mean", x, |t, v| t.segment_mean(v, 3)));
    let x = randn(&[5, 8, 6], 1.0, r);
    cases.push(unary_case("resample", x, |t, v| t.resample(v, &crate::graph::resample_indices(6, 11))));

    cases.push(Case {
        layer_type: "add_concat",
        leaves: vec![("a", randn(&[4, 5, 6], 1.0, r)), ("b", randn(&[4, 5, 6], 1.0, r)), ("c", randn(&[4, 3, 6], 1.0, r))],
        zero_grad: &[],
        build: Box::new(move |t, v| {
            let s = t.add(v[0], v[1])?;
            let y = t.concat(&[s, v[2]])?;
            project(t, y)
        }),
    });
    cases.push(Case {
        layer_type: "linear",
        leaves: vec![("x", randn(&[10, 12], 1.0, r)), ("weight", randn(&[12, 8], 0.5, r)), ("bias", randn(&[8], 0.5, r))],
        zero_grad: &[],
        build: Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y)
        }),
    });
    let labels: Vec<usize> = (0..25).map(|i| (i * 7) % 9).collect();
    cases.push(Case {
        layer_type: "softmax_xent",
        leaves: vec![("logits", randn(&[25, 9], 2.0, r))],
        zero_grad: &[],
        build: Box::new(move |t, v| t.softmax_xent(v[0], &labels)),
    });

    // Temporal block: Conv3d (3,1,1) + BN3d (train) + ReLU.
    let rm = Tensor::zeros(&[4]);
    let rv = Tensor::full(&[4], 1.0);
    cases.push(Case {
        layer_type: "temporal_block",
        leaves: vec![
            ("x", randn(&[2, 4, 5, 2, 2], 1.0, r)),
            ("weight", randn(&[4, 4, 3, 1, 1], 0.3, r)),
            ("bias", randn(&[4], 0.3, r)),
            ("gamma", Tensor::from_f64(&[4], &(0..4).map(|_| 1.0 + 0.2 * r.normal()).collect::<Vec<_>>()).expect("shape")),
            ("beta", randn(&[4], 0.3, r)),
        ],
        // The bias is a per-channel shift in front of a train-mode BN.
        zero_grad: &["bias"],
        build: Box::new(move |t, v| {
            let y = t.conv(v[0], v[1], Some(v[2]), ConvParams::padded(&[1, 0, 0]))?;
            let (y, _) = t.batchnorm(y, v[3], v[4], (&rm, &rv), Mode::Train, BnConfig::default())?;
            let y = t.relu(y);
            project(t, y)
        }),
    });
    Ok(cases)
}

/// Gradcheck of every layer type in isolation. Parameterless ops are checked
/// through their input coordinates.
pub fn check_layer_suite(cfg: &GradcheckCfg) -> Result<Vec<(String, GradcheckReport)>> {
    let mut out = Vec::new();
    for case in suite_cases(cfg.seed)? {
        let mut params = ParamSet::new();
        let mut types = BTreeMap::new();
        for (name, t) in &case.leaves {
            params.insert(*name, t.clone());
            types.insert(name.to_string(), case.layer_type.to_string());
        }
        let names: Vec<&str> = case.leaves.iter().map(|(n, _)| *n).collect();
        let build = &case.build;
        let loss_fn = |p: &ParamSet<f64>| -> Result<(Tape<f64>, Var, BTreeMap<String, Var>)> {
            let mut tape = Tape::new();
            let mut vars = BTreeMap::new();
            let mut leaves = Vec::new();
            for n in &names {
                let v = tape.param(p.get(n)?.clone());
                vars.insert(n.to_string(), v);
                leaves.push(v);
            }
            let loss = build(&mut tape, &leaves)?;
            Ok((tape, loss, vars))
        };
        let zero: BTreeSet<String> = case.zero_grad.iter().map(|n| n.to_string()).collect();
        out.push((case.layer_type.to_string(), gradcheck(&loss_fn, &params, &types, &zero, cfg)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.0 + 1e-8) - 5e-9).abs() < 1e-12);
    }

    #[test]
    fn linear_layer_is_tight() {
        let suite = check_layer_suite(&GradcheckCfg::default()).unwrap();
        let (_, lin) = suite.iter().find(|(n, _)| n == "linear").unwrap();
        assert!(lin.max_rel_err_literal < 1e-7, "{}", lin.to_text());
        assert_eq!(lin.per_type[0].coords, 200);
    }

    #[test]
    fn shift_invariant_biases_of_toy_models() {
        let st = shift_invariant_biases(&stnet_toy().unwrap().graph);
        assert!(st.contains("temporal3.conv.bias") && st.contains("temporal4.conv.bias"), "{st:?}");
        assert!(st.contains("head.unit1.dw.bias"), "{st:?}");
        assert!(!st.iter().any(|n| n.starts_with("fc") || n.contains("proj")), "{st:?}");
        let it = shift_invariant_biases(&itxn_toy().unwrap().graph);
        assert!(it.contains("early.unit1.dw.bias") && !it.contains("fc.bias"), "{it:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The value depends on 2w but the tape only records one of the two paths,
        // so autodiff reports half the true gradient.
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let types = BTreeMap::from([("w".to_string(), "probe".to_string())]);
        let loss_fn = |p: &ParamSet<f64>| -> Result<(Tape<f64>, Var, BTreeMap<String, Var>)> {
            let mut t = Tape::new();
            let w = t.param(p.get("w")?.clone());
            let doubled = t.constant(p.get("w")?.clone());
            let s = t.add(w, doubled)?;
            let loss = project(&mut t, s)?;
            Ok((t, loss, BTreeMap::from([("w".to_string(), w)])))
        };
        let r = gradcheck(&loss_fn, &params, &types, &BTreeSet::new(), &GradcheckCfg::default()).unwrap();
        assert!(r.max_rel_err > 0.3, "{}", r.to_text());
        assert!(!r.passed(DEFAULT_TOL));
    }
}
