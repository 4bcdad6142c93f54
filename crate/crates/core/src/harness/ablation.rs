//! Ablations: StNet vs an order-blind TSN baseline, iTXN vs single-modality TXNs
//! (plus their score-averaged ensemble), and train/eval segment-count transfer.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{build_itxn, build_single_txn, ItxnGraph};
use crate::harness::metrics::{ensemble_average, predict, EvalReport};
use crate::harness::source::{ClipSource, SeqSource};
use crate::harness::train::{train, CurvePoint, OptimCfg};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::stnet::{build_stnet, init_stnet_params, StNetGraph};
use crate::synthdata::{gen_multimodal_xor, gen_temporal_order, ClipDataset, SeqDataset};
use crate::tensor::{Scalar, Tensor};

pub const ABLATIONS: [&str; 3] = ["stnet_vs_tsn", "itxn_vs_single", "t_transfer"];

pub type AblationCfg = RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub prec1: f64,
    pub prec5: f64,
    pub params: usize,
    pub segments: Option<usize>,
    pub final_train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub details: BTreeMap<String, f64>,
}

impl AblationReport {
    pub fn row(&self, model: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (seed {})", self.name, self.seed);
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>10}", "model", "Prec@1", "Prec@5", "params");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>8.4} {:>8.4} {:>10}", r.model, r.prec1, r.prec5, r.params);
        }
        for (k, v) in &self.details {
            let _ = writeln!(s, "{k}: {v:.4}");
        }
        s
    }
}

/// Trained model of an ablation run.
pub struct TrainedModel<S> {
    pub name: String,
    pub params: ParamSet<S>,
    pub curve: Vec<CurvePoint>,
}

pub struct AblationOutput<S> {
    pub report: AblationReport,
    pub models: Vec<TrainedModel<S>>,
}

fn with_seed(opt: &OptimCfg, seed: u64, label: &str) -> OptimCfg {
    OptimCfg {
        seed: RngStream::new(seed).named(label).draw_u64(0),
        ..opt.clone()
    }
}

fn train_clip_model<S: Scalar>(
    cfg: &RunConfig,
    g: &StNetGraph,
    data: &ClipDataset,
    seed: u64,
    label: &str,
) -> Result<TrainedModel<S>> {
    let params = init_stnet_params::<S>(g, RngStream::new(seed).named(label).named("init"), None)?;
    let src = ClipSource {
        data,
        n_frames: cfg.n_frames,
        segments: cfg.t_train,
        norm: None,
    };
    let out = train(&g.graph, params, &src, &with_seed(&cfg.optim, seed, label))?;
    Ok(TrainedModel {
        name: label.to_string(),
        params: out.params,
        curve: out.curve,
    })
}

fn eval_clips<S: Scalar>(cfg: &RunConfig, g: &StNetGraph, m: &TrainedModel<S>, data: &ClipDataset, segments: usize) -> Result<(Tensor<S>, EvalReport)> {
    let src = ClipSource {
        data,
        n_frames: cfg.n_frames,
        segments,
        norm: None,
    };
    let scores = predict(&g.graph, &m.params, &src, cfg.eval_batch, cfg.workers)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let r = EvalReport::from_scores(&scores, &labels)?;
    Ok((scores, r))
}

fn row<S>(model: &str, r: &EvalReport, params: usize, segments: Option<usize>, m: Option<&TrainedModel<S>>) -> AblationRow {
    AblationRow {
        model: model.to_string(),
        prec1: r.top1,
        prec5: r.top5,
        params,
        segments,
        final_train_loss: m.and_then(|m| m.curve.last()).map(|c| c.loss),
    }
}

fn stnet_vs_tsn<S: Scalar>(cfg: &RunConfig, seed: u64) -> Result<AblationOutput<S>> {
    let data = gen_temporal_order(&cfg.temporal_order, seed, cfg.workers)?;
    let k = cfg.temporal_order.num_classes;
    let st = build_stnet(&cfg.stnet(k))?;
    let tsn = build_stnet(&cfg.stnet(k).tsn_baseline())?;
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for (name, g) in [("StNet", &st), ("TSN-baseline", &tsn)] {
        let m = train_clip_model::<S>(cfg, g, &data.train, seed, name)?;
        let (_, r) = eval_clips(cfg, g, &m, &data.test, cfg.t_train)?;
        rows.push(row(name, &r, g.graph.param_count(), Some(cfg.t_train), Some(&m)));
        models.push(m);
    }
    Ok(AblationOutput {
        report: AblationReport {
            name: "stnet_vs_tsn".into(),
            seed,
            rows,
            details: BTreeMap::from([("chance".to_string(), 1.0 / k as f64)]),
        },
        models,
    })
}

fn t_transfer<S: Scalar>(cfg: &RunConfig, seed: u64) -> Result<AblationOutput<S>> {
    let data = gen_temporal_order(&cfg.temporal_order, seed, cfg.workers)?;
    let g = build_stnet(&cfg.stnet(cfg.temporal_order.num_classes))?;
    let m = train_clip_model::<S>(cfg, &g, &data.train, seed, "StNet")?;
    let mut rows = Vec::new();
    for t in [cfg.t_train, cfg.t_eval] {
        let (_, r) = eval_clips(cfg, &g, &m, &data.test, t)?;
        rows.push(row(&format!("StNet T_eval={t}"), &r, g.graph.param_count(), Some(t), Some(&m)));
    }
    Ok(AblationOutput {
        report: AblationReport {
            name: "t_transfer".into(),
            seed,
            rows,
            details: BTreeMap::from([("t_train".to_string(), cfg.t_train as f64)]),
        },
        models: vec![m],
    })
}

fn train_seq_model<S: Scalar>(cfg: &RunConfig, g: &ItxnGraph, train_set: &SeqDataset, test_set: &SeqDataset, seed: u64, label: &str) -> Result<(TrainedModel<S>, Tensor<S>)> {
    let params = g.graph.init_params::<S>(RngStream::new(seed).named(label).named("init"));
    let out = train(&g.graph, params, &SeqSource { data: train_set, model: g }, &with_seed(&cfg.fusion_optim, seed, label))?;
    let scores = predict(&g.graph, &out.params, &SeqSource { data: test_set, model: g }, cfg.eval_batch, cfg.workers)?;
    Ok((
        TrainedModel {
            name: label.to_string(),
            params: out.params,
            curve: out.curve,
        },
        scores,
    ))
}

fn itxn_vs_single<S: Scalar>(cfg: &RunConfig, seed: u64) -> Result<AblationOutput<S>> {
    let xc = &cfg.multimodal_xor;
    let data = gen_multimodal_xor(xc, seed, cfg.workers)?;
    let labels: Vec<usize> = data.test.samples.iter().map(|s| s.label).collect();
    let mut rows = Vec::new();
    let mut models = Vec::new();

    let g = build_itxn(&xc.dims, &cfg.fusion_txn, 2)?;
    let (m, scores) = train_seq_model::<S>(cfg, &g, &data.train, &data.test, seed, "iTXN")?;
    rows.push(row("iTXN", &EvalReport::from_scores(&scores, &labels)?, g.graph.param_count(), None, Some(&m)));
    models.push(m);

    let mut singles = Vec::new();
    for (&modality, &d) in &xc.dims {
        let g = build_single_txn(modality, d, &cfg.fusion_txn, 2)?;
        let name = format!("TXN({modality})");
        let (m, scores) = train_seq_model::<S>(cfg, &g, &data.train.select(modality)?, &data.test.select(modality)?, seed, &name)?;
        rows.push(row(&name, &EvalReport::from_scores(&scores, &labels)?, g.graph.param_count(), None, Some(&m)));
        models.push(m);
        singles.push(scores);
    }
    let weights = if cfg.ensemble_weights.is_empty() {
        vec![1.0; singles.len()]
    } else {
        cfg.ensemble_weights.clone()
    };
    let ens = ensemble_average(&singles, &weights)?;
    rows.push(row::<S>("Ensemble(single)", &EvalReport::from_scores(&ens, &labels)?, 0, None, None));

    let mut details: BTreeMap<String, f64> = data.probe_acc.iter().map(|(m, a)| (format!("probe_{m}"), *a)).collect();
    details.insert("generation_attempts".into(), data.attempts as f64);
    for (m, t) in &data.lengths {
        details.insert(format!("length_{m}"), *t as f64);
    }
    Ok(AblationOutput {
        report: AblationReport {
            name: "itxn_vs_single".into(),
            seed,
            rows,
            details,
        },
        models,
    })
}

/// Runs a named ablation. Deterministic for a fixed config and seed.
pub fn run_ablation<S: Scalar>(name: &str, cfg: &RunConfig, seed: u64) -> Result<AblationOutput<S>> {
    cfg.validate()?;
    match name {
        "stnet_vs_tsn" => stnet_vs_tsn(cfg, seed),
        "itxn_vs_single" => itxn_vs_single(cfg, seed),
        "t_transfer" => t_transfer(cfg, seed),
        _ => Err(Error::invalid(format!("unknown ablation `{name}` (valid: {})", ABLATIONS.join(", ")))),
    }
}
