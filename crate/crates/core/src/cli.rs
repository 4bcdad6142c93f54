//! Command-line entry point. Exit codes: 0 success, 1 invalid input (bad flags,
//! config or data, failed gradient check), 2 internal error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::fusion::{build_itxn, build_single_txn, ItxnGraph, Modality};
use crate::gradcheck::{check_itxn_toy, check_layer_suite, check_stnet_toy, GradcheckCfg, GradcheckReport, DEFAULT_TOL};
use crate::harness::metrics::{ensemble_average, predict, EvalReport};
use crate::harness::source::{ClipSource, SeqSource};
use crate::harness::train::{curve_csv, train, CurvePoint, OptimCfg};
use crate::harness::{run_ablation, ABLATIONS};
use crate::params::{saved_dtype, ParamSet};
use crate::rng::RngStream;
use crate::stnet::{build_stnet, init_stnet_params, StNetGraph};
use crate::synthdata::{gen_multimodal_xor, gen_temporal_order, ClipDataset, SeqDataset};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Parser, Debug)]
#[command(name = "stnet", version, about = "Train, evaluate and inspect StNet and iTXN models on synthetic tasks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    dtype: Option<DTypeArg>,
    /// Segments per clip during training.
    #[arg(long, global = true)]
    t_train: Option<usize>,
    /// Segments per clip during evaluation.
    #[arg(long, global = true)]
    t_eval: Option<usize>,
    /// Frames per segment (N).
    #[arg(long, global = true)]
    n_frames: Option<usize>,
    /// Threads for data generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum Task {
    TemporalOrder,
    MultimodalXor,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DescribeModel {
    Stnet,
    Tsn,
    Itxn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CheckTarget {
    Stnet,
    Itxn,
    Layers,
    All,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Print the layer table and parameter counts of a model.
    Describe {
        #[arg(long, value_enum, default_value = "stnet")]
        model: DescribeModel,
        /// Number of classes of the classifier head.
        #[arg(long, default_value_t = 400)]
        classes: usize,
        /// Spatial size used for shape inference.
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Compare autodiff gradients against central finite differences (f64).
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        model: CheckTarget,
        /// Coordinates sampled per layer type.
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Generate a synthetic dataset into --out.
    GenData {
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[arg(long, value_enum)]
        task: Task,
        /// stnet | tsn (temporal_order); itxn | txn-<modality> (multimodal_xor).
        #[arg(long)]
        model: String,
        /// Dataset written by gen-data; generated from --seed when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained run directory on the test split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a named ablation (stnet_vs_tsn, itxn_vs_single, t_transfer).
    Ablate {
        #[arg(long)]
        name: String,
    },
    /// Average the test scores of several train/eval runs.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// One weight per run; equal weights when omitted.
        #[arg(long, num_args = 1..)]
        weights: Vec<f64>,
    },
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
enum Fail {
    Invalid(String),
    Internal(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Fail::Invalid(e.to_string())
        } else {
            Fail::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail::Internal(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Fail>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let result = dispatch(&cli).map(|_| ());
    // Timing lives in meta.json so that report.json is reproducible byte for byte.
    if let Some(dir) = cli.common.out.as_deref().filter(|d| d.is_dir()) {
        if let Err(e) = write_meta(dir, &argv, started) {
            eprintln!("warning: could not write meta.json: {e:?}");
        }
    }
    match result {
        Ok(()) => 0,
        Err(Fail::Invalid(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Fail::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    }
}

fn write_meta(dir: &Path, argv: &[OsString], started: Instant) -> CliResult<()> {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "finished_unix": unix,
        "elapsed_secs": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn resolve(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| Fail::Invalid(e.to_string()))?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, c);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = c.dtype {
        cfg.dtype = d.into();
    }
    if let Some(t) = c.t_train {
        cfg.t_train = t;
    }
    if let Some(t) = c.t_eval {
        cfg.t_eval = t;
    }
    if let Some(n) = c.n_frames {
        cfg.n_frames = n;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
}

fn out_dir(c: &Common, cmd: &str) -> CliResult<PathBuf> {
    let dir = c.out.clone().ok_or_else(|| Fail::Invalid(format!("`{cmd}` requires --out")))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<Option<PathBuf>> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Describe { model, classes, size } => describe(c, *model, *classes, *size),
        Cmd::Gradcheck { model, coords } => gradcheck(c, *model, *coords),
        Cmd::GenData { task } => gen_data(c, *task),
        Cmd::Train { task, model, data } => {
            let cfg = resolve(c)?;
            match cfg.dtype {
                DType::F32 => train_cmd::<f32>(c, &cfg, *task, model, data.as_deref()),
                DType::F64 => train_cmd::<f64>(c, &cfg, *task, model, data.as_deref()),
            }
        }
        Cmd::Eval { run, data } => eval_cmd(c, run, data.as_deref()),
        Cmd::Ablate { name } => ablate(c, name),
        Cmd::Ensemble { runs, weights } => ensemble(c, runs, weights),
    }
}

fn describe(c: &Common, model: DescribeModel, classes: usize, size: usize) -> CliResult<Option<PathBuf>> {
    let cfg = resolve(c)?;
    let (text, json) = match model {
        DescribeModel::Stnet | DescribeModel::Tsn => {
            let mut sc = cfg.stnet(classes);
            if matches!(model, DescribeModel::Tsn) {
                sc = sc.tsn_baseline();
            }
            let g = build_stnet(&sc)?;
            let d = g.describe(cfg.t_eval, size, size)?;
            (d.to_text(), serde_json::to_value(&d)?)
        }
        DescribeModel::Itxn => {
            let g = build_itxn(&cfg.multimodal_xor.dims, &cfg.fusion_txn, classes)?;
            let d = g.graph.describe(None)?;
            (d.to_text(), serde_json::to_value(&d)?)
        }
    };
    print!("{text}");
    match &c.out {
        Some(_) => {
            let dir = out_dir(c, "describe")?;
            fs::write(dir.join("describe.txt"), &text)?;
            write_json(&dir.join("describe.json"), &json)?;
            write_json(&dir.join("config.json"), &cfg)?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

#[derive(Serialize)]
struct GradcheckOutput {
    seed: u64,
    tol: f64,
    passed: bool,
    max_rel_err: f64,
    worst_param: String,
    max_rel_err_literal: f64,
    reports: BTreeMap<String, GradcheckReport>,
}

fn gradcheck(c: &Common, target: CheckTarget, coords: usize) -> CliResult<Option<PathBuf>> {
    if matches!(c.dtype, Some(DTypeArg::F32)) {
        return Err(Fail::Invalid("gradcheck runs in f64 only; use --dtype f64".into()));
    }
    let seed = c.seed.unwrap_or(0);
    let cfg = GradcheckCfg { coords_per_type: coords, seed };
    let mut reports = BTreeMap::new();
    if matches!(target, CheckTarget::Layers | CheckTarget::All) {
        for (name, r) in check_layer_suite(&cfg)? {
            reports.insert(format!("layer:{name}"), r);
        }
    }
    if matches!(target, CheckTarget::Stnet | CheckTarget::All) {
        reports.insert("stnet_toy".into(), check_stnet_toy(&cfg)?);
    }
    if matches!(target, CheckTarget::Itxn | CheckTarget::All) {
        reports.insert("itxn_toy".into(), check_itxn_toy(&cfg)?);
    }
    for (name, r) in &reports {
        println!("== {name}\n{}", r.to_text());
    }
    let (worst_name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .ok_or_else(|| Fail::Internal("no gradient checks ran".into()))?;
    let passed = reports.values().all(|r| r.passed(DEFAULT_TOL));
    let out = GradcheckOutput {
        seed,
        tol: DEFAULT_TOL,
        passed,
        max_rel_err: worst.max_rel_err,
        worst_param: format!("{worst_name}: {}", worst.worst_param),
        max_rel_err_literal: reports.values().map(|r| r.max_rel_err_literal).fold(0.0, f64::max),
        reports,
    };
    println!("max_rel_err {:.3e} ({})", out.max_rel_err, out.worst_param);
    let dir = match &c.out {
        Some(_) => {
            let dir = out_dir(c, "gradcheck")?;
            write_json(&dir.join("report.json"), &out)?;
            Some(dir)
        }
        None => None,
    };
    if !passed {
        return Err(Fail::Invalid(format!("gradcheck failed: max_rel_err {:.3e} >= {DEFAULT_TOL:e}", out.max_rel_err)));
    }
    Ok(dir)
}

fn gen_data(c: &Common, task: Task) -> CliResult<Option<PathBuf>> {
    let cfg = resolve(c)?;
    let dir = out_dir(c, "gen-data")?;
    let summary = match task {
        Task::TemporalOrder => {
            let d = gen_temporal_order(&cfg.temporal_order, cfg.seed, cfg.workers)?;
            d.train.save(&dir.join("train"))?;
            d.test.save(&dir.join("test"))?;
            serde_json::json!({"task": task, "seed": cfg.seed, "permutations": d.permutations,
                "train": d.train.samples.len(), "test": d.test.samples.len()})
        }
        Task::MultimodalXor => {
            let d = gen_multimodal_xor(&cfg.multimodal_xor, cfg.seed, cfg.workers)?;
            d.train.save(&dir.join("train"))?;
            d.test.save(&dir.join("test"))?;
            serde_json::json!({"task": task, "seed": cfg.seed, "lengths": d.lengths, "probe_acc": d.probe_acc,
                "attempts": d.attempts, "train": d.train.samples.len(), "test": d.test.samples.len()})
        }
    };
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(&dir.join("data.json"), &summary)?;
    println!("wrote {} to {}", serde_json::to_string(&task)?.trim_matches('"'), dir.display());
    Ok(Some(dir))
}

/// Identity of a trained model, stored as `model.json` in its run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelSpec {
    task: Task,
    model: String,
}

enum Built {
    Clip(StNetGraph),
    Seq(ItxnGraph, Option<Modality>),
}

impl Built {
    fn graph(&self) -> &crate::graph::ModelGraph {
        match self {
            Built::Clip(g) => &g.graph,
            Built::Seq(g, _) => &g.graph,
        }
    }
}

fn build_model(cfg: &RunConfig, spec: &ModelSpec) -> CliResult<Built> {
    match (spec.task, spec.model.as_str()) {
        (Task::TemporalOrder, "stnet") => Ok(Built::Clip(build_stnet(&cfg.stnet(cfg.temporal_order.num_classes))?)),
        (Task::TemporalOrder, "tsn") => Ok(Built::Clip(build_stnet(&cfg.stnet(cfg.temporal_order.num_classes).tsn_baseline())?)),
        (Task::MultimodalXor, "itxn") => Ok(Built::Seq(build_itxn(&cfg.multimodal_xor.dims, &cfg.fusion_txn, 2)?, None)),
        (Task::MultimodalXor, m) if m.starts_with("txn-") => {
            let modality: Modality = m["txn-".len()..].parse()?;
            let d = *cfg
                .multimodal_xor
                .dims
                .get(&modality)
                .ok_or_else(|| Fail::Invalid(format!("modality `{modality}` is not configured")))?;
            Ok(Built::Seq(build_single_txn(modality, d, &cfg.fusion_txn, 2)?, Some(modality)))
        }
        (Task::TemporalOrder, m) => Err(Fail::Invalid(format!("unknown model `{m}` for temporal_order (valid: stnet, tsn)"))),
        (Task::MultimodalXor, m) => Err(Fail::Invalid(format!("unknown model `{m}` for multimodal_xor (valid: itxn, txn-<modality>)"))),
    }
}

enum Data {
    Clips { train: ClipDataset, test: ClipDataset },
    Seqs { train: SeqDataset, test: SeqDataset },
}

fn load_data(cfg: &RunConfig, task: Task, dir: Option<&Path>, need_train: bool) -> CliResult<Data> {
    let invalid = |e: Error| Fail::Invalid(e.to_string());
    match (task, dir) {
        (Task::TemporalOrder, Some(d)) => Ok(Data::Clips {
            train: if need_train { ClipDataset::load(&d.join("train")).map_err(invalid)? } else { ClipDataset { num_classes: 0, samples: vec![] } },
            test: ClipDataset::load(&d.join("test")).map_err(invalid)?,
        }),
        (Task::MultimodalXor, Some(d)) => Ok(Data::Seqs {
            train: if need_train { SeqDataset::load(&d.join("train")).map_err(invalid)? } else { SeqDataset { num_classes: 0, samples: vec![] } },
            test: SeqDataset::load(&d.join("test")).map_err(invalid)?,
        }),
        (Task::TemporalOrder, None) => {
            let d = gen_temporal_order(&cfg.temporal_order, cfg.seed, cfg.workers)?;
            Ok(Data::Clips { train: d.train, test: d.test })
        }
        (Task::MultimodalXor, None) => {
            let d = gen_multimodal_xor(&cfg.multimodal_xor, cfg.seed, cfg.workers)?;
            Ok(Data::Seqs { train: d.train, test: d.test })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Scores {
    labels: Vec<usize>,
    scores: Vec<Vec<f64>>,
}

impl Scores {
    fn new<S: Scalar>(t: &Tensor<S>, labels: Vec<usize>) -> Self {
        let k = t.shape()[1];
        let scores = t.data().chunks(k).map(|r| r.iter().map(|v| v.to_f64()).collect()).collect();
        Scores { labels, scores }
    }

    fn tensor(&self) -> CliResult<Tensor<f64>> {
        let k = self.scores.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.scores.iter().flatten().copied().collect();
        Ok(Tensor::from_f64(&[self.scores.len(), k], &flat)?)
    }
}

#[derive(Serialize)]
struct RunReport {
    task: Task,
    model: String,
    seed: u64,
    dtype: DType,
    params: usize,
    segments: Option<usize>,
    final_train_loss: Option<f64>,
    test: EvalReport,
}

/// Test-set scores of `params`; clip models are evaluated at `cfg.t_eval` segments.
fn score<S: Scalar>(cfg: &RunConfig, built: &Built, params: &ParamSet<S>, data: &Data) -> CliResult<(Tensor<S>, Vec<usize>, Option<usize>)> {
    match (built, data) {
        (Built::Clip(g), Data::Clips { test, .. }) => {
            let src = ClipSource {
                data: test,
                n_frames: cfg.n_frames,
                segments: cfg.t_eval,
                norm: None,
            };
            let s = predict(&g.graph, params, &src, cfg.eval_batch, cfg.workers)?;
            Ok((s, test.samples.iter().map(|x| x.label).collect(), Some(cfg.t_eval)))
        }
        (Built::Seq(g, m), Data::Seqs { test, .. }) => {
            let test = match m {
                Some(m) => test.select(*m)?,
                None => test.clone(),
            };
            let s = predict(&g.graph, params, &SeqSource { data: &test, model: g }, cfg.eval_batch, cfg.workers)?;
            Ok((s, test.samples.iter().map(|x| x.label).collect(), None))
        }
        _ => Err(Fail::Internal("model and dataset kinds disagree".into())),
    }
}

fn write_run<S: Scalar>(dir: &Path, cfg: &RunConfig, spec: &ModelSpec, built: &Built, params: &ParamSet<S>, curve: Option<&[CurvePoint]>, data: &Data) -> CliResult<EvalReport> {
    let (scores, labels, segments) = score(cfg, built, params, data)?;
    let test = EvalReport::from_scores(&scores, &labels)?;
    let report = RunReport {
        task: spec.task,
        model: spec.model.clone(),
        seed: cfg.seed,
        dtype: cfg.dtype,
        params: built.graph().param_count(),
        segments,
        final_train_loss: curve.and_then(|c| c.last()).map(|p| p.loss),
        test: test.clone(),
    };
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("model.json"), spec)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("scores.json"), &Scores::new(&scores, labels))?;
    Ok(test)
}

fn train_cmd<S: Scalar>(c: &Common, cfg: &RunConfig, task: Task, model: &str, data_dir: Option<&Path>) -> CliResult<Option<PathBuf>> {
    let spec = ModelSpec { task, model: model.to_string() };
    let built = build_model(cfg, &spec)?;
    let dir = out_dir(c, "train")?;
    let data = load_data(cfg, task, data_dir, true)?;
    let root = RngStream::new(cfg.seed).named(model);
    let opt = |base: &OptimCfg| OptimCfg {
        seed: root.draw_u64(0),
        ..base.clone()
    };
    let out = match (&built, &data) {
        (Built::Clip(g), Data::Clips { train: tr, .. }) => {
            let params = init_stnet_params::<S>(g, root.named("init"), None)?;
            let src = ClipSource {
                data: tr,
                n_frames: cfg.n_frames,
                segments: cfg.t_train,
                norm: None,
            };
            train(&g.graph, params, &src, &opt(&cfg.optim))?
        }
        (Built::Seq(g, m), Data::Seqs { train: tr, .. }) => {
            let tr = match m {
                Some(m) => tr.select(*m)?,
                None => tr.clone(),
            };
            let params = g.graph.init_params::<S>(root.named("init"));
            train(&g.graph, params, &SeqSource { data: &tr, model: g }, &opt(&cfg.fusion_optim))?
        }
        _ => return Err(Fail::Internal("model and dataset kinds disagree".into())),
    };
    out.params.save(&dir.join("params"))?;
    fs::write(dir.join("curve.csv"), curve_csv(&out.curve))?;
    let r = write_run(&dir, cfg, &spec, &built, &out.params, Some(&out.curve), &data)?;
    println!("{model}: test top1 {:.4} top5 {:.4}", r.top1, r.top5);
    Ok(Some(dir))
}

fn eval_cmd(c: &Common, run: &Path, data_dir: Option<&Path>) -> CliResult<Option<PathBuf>> {
    let read = |name: &str| -> CliResult<String> {
        fs::read_to_string(run.join(name)).map_err(|e| Fail::Invalid(format!("{}: {e}", run.join(name).display())))
    };
    let mut cfg: RunConfig = serde_json::from_str(&read("config.json")?).map_err(|e| Fail::Invalid(format!("config.json: {e}")))?;
    let spec: ModelSpec = serde_json::from_str(&read("model.json")?).map_err(|e| Fail::Invalid(format!("model.json: {e}")))?;
    if let Some(p) = &c.config {
        cfg = RunConfig::load(p).map_err(|e| Fail::Invalid(e.to_string()))?;
    }
    apply_overrides(&mut cfg, c);
    cfg.validate()?;
    let built = build_model(&cfg, &spec)?;
    let dir = out_dir(c, "eval")?;
    let data = load_data(&cfg, spec.task, data_dir, false)?;
    let pdir = run.join("params");
    let stored = saved_dtype(&pdir)?.unwrap_or(cfg.dtype);
    let r = match (stored, cfg.dtype) {
        (DType::F32, DType::F32) => write_run(&dir, &cfg, &spec, &built, &ParamSet::<f32>::load(&pdir)?, None, &data)?,
        (DType::F64, DType::F64) => write_run(&dir, &cfg, &spec, &built, &ParamSet::<f64>::load(&pdir)?, None, &data)?,
        (DType::F32, DType::F64) => write_run(&dir, &cfg, &spec, &built, &ParamSet::<f32>::load(&pdir)?.cast::<f64>(), None, &data)?,
        (DType::F64, DType::F32) => write_run(&dir, &cfg, &spec, &built, &ParamSet::<f64>::load(&pdir)?.cast::<f32>(), None, &data)?,
    };
    println!("{}: test top1 {:.4} top5 {:.4}", spec.model, r.top1, r.top5);
    Ok(Some(dir))
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

fn ablate(c: &Common, name: &str) -> CliResult<Option<PathBuf>> {
    if !ABLATIONS.contains(&name) {
        return Err(Fail::Invalid(format!("unknown ablation `{name}` (valid: {})", ABLATIONS.join(", "))));
    }
    let cfg = resolve(c)?;
    let dir = out_dir(c, "ablate")?;
    macro_rules! go {
        ($s:ty) => {{
            let out = run_ablation::<$s>(name, &cfg, cfg.seed)?;
            let mut curve = String::from("model,epoch,loss,top1\n");
            for m in &out.models {
                m.params.save(&dir.join("params").join(slug(&m.name)))?;
                for line in curve_csv(&m.curve).lines().skip(1) {
                    curve.push_str(&format!("{},{line}\n", m.name));
                }
            }
            (out.report, curve)
        }};
    }
    let (report, curve) = match cfg.dtype {
        DType::F32 => go!(f32),
        DType::F64 => go!(f64),
    };
    write_json(&dir.join("config.json"), &cfg)?;
    fs::write(dir.join("curve.csv"), curve)?;
    write_json(&dir.join("report.json"), &report)?;
    print!("{}", report.to_text());
    Ok(Some(dir))
}

#[derive(Serialize)]
struct EnsembleReport {
    runs: Vec<String>,
    weights: Vec<f64>,
    members: Vec<EvalReport>,
    ensemble: EvalReport,
}

fn ensemble(c: &Common, runs: &[PathBuf], weights: &[f64]) -> CliResult<Option<PathBuf>> {
    let weights = if weights.is_empty() { vec![1.0; runs.len()] } else { weights.to_vec() };
    if weights.len() != runs.len() {
        return Err(Fail::Invalid(format!("{} weights for {} runs", weights.len(), runs.len())));
    }
    let mut sets = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    let mut members = Vec::new();
    for r in runs {
        let path = r.join("scores.json");
        let text = fs::read_to_string(&path).map_err(|e| Fail::Invalid(format!("{}: {e}", path.display())))?;
        let s: Scores = serde_json::from_str(&text).map_err(|e| Fail::Invalid(format!("{}: {e}", path.display())))?;
        match &labels {
            Some(l) if *l != s.labels => return Err(Fail::Invalid(format!("{} was scored on a different test set", r.display()))),
            _ => labels = Some(s.labels.clone()),
        }
        let t = s.tensor()?;
        members.push(EvalReport::from_scores(&t, &s.labels)?);
        sets.push(t);
    }
    let labels = labels.unwrap_or_default();
    let ens = ensemble_average(&sets, &weights)?;
    let report = EnsembleReport {
        runs: runs.iter().map(|p| p.display().to_string()).collect(),
        weights,
        members,
        ensemble: EvalReport::from_scores(&ens, &labels)?,
    };
    let dir = out_dir(c, "ensemble")?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("scores.json"), &Scores::new(&ens, labels))?;
    println!("ensemble: test top1 {:.4} top5 {:.4}", report.ensemble.top1, report.ensemble.top5);
    Ok(Some(dir))
}
