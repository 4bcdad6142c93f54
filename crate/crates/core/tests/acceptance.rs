//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fail.
//!
//! Runs without the libtest harness so the lines show up under a plain `cargo test`.
//! Positional arguments select criteria by substring, e.g.
//! `cargo test --test acceptance -- gradient oracle`.
//! The two training ablations run three seeds each, twice, which takes a while on one core.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{cases, max_rel_diff, randn};
use stnet::config::RunConfig;
use stnet::fusion::build_itxn;
use stnet::gradcheck::{check_itxn_toy, check_layer_suite, check_stnet_toy, GradcheckCfg, GradcheckReport, DEFAULT_TOL};
use stnet::graph::{ExecOptions, Forward, LayerKind, ModelGraph};
use stnet::harness::{evaluate, run_ablation, train, AblationReport, ClipSource, OptimCfg};
use stnet::kernels::{conv_forward, ConvParams, Mode};
use stnet::params::ParamSet;
use stnet::rng::RngStream;
use stnet::sampling::SuperImageBatch;
use stnet::stnet::{build_stnet, forward_stnet, init_stnet_params, StNetGraph, STEM_CONV};
use stnet::synthdata::{gen_temporal_order, TemporalOrderCfg};
use stnet::Tensor;

const SEEDS: [u64; 3] = [1, 2, 3];
const ORACLE_CASES: u64 = 100;
const ORACLE_TOL: f64 = 1e-12;
const SUITE_BUDGET: Duration = Duration::from_secs(300);
const RUN_BUDGET: Duration = Duration::from_secs(600);

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// gradients

fn gradients() -> Check {
    let t0 = Instant::now();
    let cfg = GradcheckCfg::default();
    let mut reports: Vec<(String, GradcheckReport)> = check_layer_suite(&cfg).map_err(|e| e.to_string())?;
    reports.push(("stnet_toy".into(), check_stnet_toy(&cfg).map_err(|e| e.to_string())?));
    reports.push(("itxn_toy".into(), check_itxn_toy(&cfg).map_err(|e| e.to_string())?));
    let elapsed = t0.elapsed();

    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed(DEFAULT_TOL)).map(|(n, _)| n.as_str()).collect();
    let worst = |f: fn(&GradcheckReport) -> f64, pick: &dyn Fn(&str) -> bool| {
        reports.iter().filter(|(n, _)| pick(n)).map(|(_, r)| f(r)).fold(0.0, f64::max)
    };
    let toy = |n: &str| n.ends_with("_toy");
    let layer = |n: &str| !n.ends_with("_toy");
    // Toy-model layer types with fewer than 200 coordinates are checked exhaustively.
    let min_coords = reports
        .iter()
        .filter(|(n, _)| layer(n))
        .flat_map(|(_, r)| r.per_type.iter().map(|t| t.coords))
        .min()
        .unwrap_or(0);
    let detail = format!(
        "{} checks, >= {} coords per layer type (toy models: >= 200 or all); max rel err layers {:.2e} (unadjusted {:.2e}), toy models {:.2e} (unadjusted {:.2e}); \
         zero-gradient biases max |g| {:.1e}; {}",
        reports.len(),
        min_coords,
        worst(|r| r.max_rel_err, &layer),
        worst(|r| r.max_rel_err_literal, &layer),
        worst(|r| r.max_rel_err, &toy),
        worst(|r| r.max_rel_err_literal, &toy),
        worst(|r| r.zero_grad_max_abs, &|_| true),
        secs(elapsed),
    );
    ensure(failed.is_empty() && min_coords >= 200 && elapsed < SUITE_BUDGET, if failed.is_empty() { detail } else { format!("{detail}; failing: {failed:?}") })
}

// ---------------------------------------------------------------------------
// oracles

fn oracles() -> Check {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (op, run) in cases::OPS {
        let w = run(ORACLE_CASES);
        ok &= w.err <= ORACLE_TOL;
        parts.push(format!("{op} {:.1e}", w.err));
    }
    let elapsed = t0.elapsed();
    ensure(
        ok && elapsed < SUITE_BUDGET,
        format!("{ORACLE_CASES} cases per op, worst normwise rel err: {}; {}", parts.join(", "), secs(elapsed)),
    )
}

// ---------------------------------------------------------------------------
// init invariants

fn eval_forward(g: &StNetGraph, p: &ParamSet<f64>, clips: Tensor<f64>) -> Result<Forward<f64>, String> {
    let b = clips.shape()[0];
    let batch = SuperImageBatch { clips, labels: vec![0; b] };
    forward_stnet(g, p, &batch, Mode::Eval, ExecOptions::default()).map_err(|e| e.to_string())
}

/// (a) the inflated stem on N copies of a frame equals the 2-D stem on that frame.
fn inflation_identity() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for n in [1, 2, 5] {
        let cfg = RunConfig { n_frames: n, ..RunConfig::default() };
        let g = build_stnet(&cfg.stnet(4)).map_err(|e| e.to_string())?;
        let LayerKind::Conv { out_channels, kernel, stride, padding, .. } = g.graph.layer(STEM_CONV).unwrap().kind.clone() else {
            return Err("stem is not a convolution".into());
        };
        let mut r = RngStream::new(n as u64).named("inflation").rng();
        let w2d = randn(&[out_channels, 3, kernel[0], kernel[1]], &mut r);
        // A full 2-D parameter set whose stem is the 3-channel kernel above.
        let mut base = init_stnet_params::<f64>(&g, RngStream::new(1), None).map_err(|e| e.to_string())?;
        base.insert(format!("{STEM_CONV}.weight"), w2d.clone());
        let p = init_stnet_params(&g, RngStream::new(0), Some(&base)).map_err(|e| e.to_string())?;
        let frame = randn(&[2, 3, 16, 16], &mut r);
        let plane = 3 * 16 * 16;
        let mut stacked = Vec::with_capacity(2 * n * plane);
        for b in 0..2 {
            for _ in 0..n {
                stacked.extend_from_slice(&frame.data()[b * plane..(b + 1) * plane]);
            }
        }
        let x = Tensor::new(vec![2, 3 * n, 16, 16], stacked).unwrap();
        let cp = ConvParams::padded(&padding).with_stride(&stride);
        let y2d = conv_forward(&frame, &w2d, None, &cp).map_err(|e| e.to_string())?;
        let y = conv_forward(&x, p.get(&format!("{STEM_CONV}.weight")).unwrap(), None, &cp).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_diff(&y, &y2d));
    }
    Ok(worst)
}

/// (b) every output channel of each temporal 3-D conv is the same at init.
fn temporal_channels_identical(g: &StNetGraph, f: &Forward<f64>) -> Result<usize, String> {
    let mut checked = 0;
    for tb in &g.temporal_blocks {
        let name = format!("temporal{}.conv", tb.insert_after_stage);
        let y = f.value(&name).map_err(|e| e.to_string())?;
        let (b, c) = (y.shape()[0], y.shape()[1]);
        let inner: usize = y.shape()[2..].iter().product();
        for bi in 0..b {
            let first = &y.data()[bi * c * inner..(bi * c + 1) * inner];
            for ci in 1..c {
                let other = &y.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                if first.iter().zip(other).any(|(a, o)| a.to_bits() != o.to_bits()) {
                    return Err(format!("{name}: channel {ci} differs from channel 0"));
                }
            }
        }
        checked += 1;
    }
    Ok(checked)
}

/// (c) every batch norm passes its input through unchanged in eval mode at init.
fn bn_identity(graph: &ModelGraph, f: &Forward<f64>) -> Result<usize, String> {
    let mut checked = 0;
    for l in graph.layers.iter().filter(|l| matches!(l.kind, LayerKind::BatchNorm { .. })) {
        let y = f.value(&l.name).map_err(|e| e.to_string())?;
        let x = f.value(&l.inputs[0]).map_err(|e| e.to_string())?;
        if !y.bitwise_eq(x) {
            return Err(format!("{} is not the identity", l.name));
        }
        checked += 1;
    }
    Ok(checked)
}

/// (d) temporal (1-D and 3-D) conv weights are exactly `1/(3 C_i)`, biases exactly 0.
fn temporal_init_values(graph: &ModelGraph, p: &ParamSet<f64>) -> Result<usize, String> {
    let mut checked = 0;
    for l in &graph.layers {
        let LayerKind::Conv { kernel, in_channels, groups, .. } = &l.kind else { continue };
        if kernel.len() == 2 {
            continue;
        }
        let want = 1.0 / (3 * (in_channels / groups)) as f64;
        if p.get(&format!("{}.weight", l.name)).unwrap().data().iter().any(|&v| v != want) {
            return Err(format!("{}.weight is not 1/(3*{})", l.name, in_channels / groups));
        }
        if let Ok(b) = p.get(&format!("{}.bias", l.name)) {
            if b.data().iter().any(|&v| v != 0.0) {
                return Err(format!("{}.bias is not zero", l.name));
            }
        }
        checked += 1;
    }
    Ok(checked)
}

fn init_invariants() -> Check {
    let a = inflation_identity()?;

    let g = build_stnet(&RunConfig::default().stnet(4)).map_err(|e| e.to_string())?;
    let p = init_stnet_params::<f64>(&g, RngStream::new(7), None).map_err(|e| e.to_string())?;
    let mut r = RngStream::new(7).named("clips").rng();
    let f = eval_forward(&g, &p, randn(&[2, 7, 15, 32, 32], &mut r))?;
    let b = temporal_channels_identical(&g, &f)?;
    let mut c = bn_identity(&g.graph, &f)?;
    let mut d = temporal_init_values(&g.graph, &p)?;

    let x = build_itxn(&RunConfig::default().multimodal_xor.dims, &RunConfig::default().fusion_txn, 2).map_err(|e| e.to_string())?;
    let xp = x.graph.init_params::<f64>(RngStream::new(7));
    let inputs: BTreeMap<String, Tensor<f64>> = x
        .dims
        .iter()
        .map(|(m, &d)| (m.name().to_string(), randn(&[3, d, 9], &mut r)))
        .collect();
    let xf = x.graph.forward(&xp, &inputs, Mode::Eval, ExecOptions::default()).map_err(|e| e.to_string())?;
    c += bn_identity(&x.graph, &xf)?;
    d += temporal_init_values(&x.graph, &xp)?;

    ensure(
        a <= 1e-12 && b > 0,
        format!(
            "(a) inflation N=1,2,5 max rel err {a:.1e}; (b) {b} temporal convs with identical channels; \
             (c) {c} batch norms bitwise identity; (d) {d} temporal convs at exactly 1/(3 C_i), zero bias"
        ),
    )
}

// ---------------------------------------------------------------------------
// shape/regime contract

/// Trainable parameter count of a layer from its hyperparameters alone.
fn closed_form(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Conv { in_channels, out_channels, kernel, groups, bias, .. } => {
            out_channels * (in_channels / groups) * kernel.iter().product::<usize>() + if *bias { *out_channels } else { 0 }
        }
        LayerKind::BatchNorm { channels, .. } => 2 * channels,
        LayerKind::Linear { in_features, out_features } => (in_features + 1) * out_features,
        _ => 0,
    }
}

fn shape_contract() -> Check {
    // Train briefly at T = 7, then evaluate the same parameters at T = 25.
    let cfg = RunConfig::default();
    let data_cfg = TemporalOrderCfg { n_train: 16, n_test: 8, ..cfg.temporal_order.clone() };
    let data = gen_temporal_order(&data_cfg, 1, 1).map_err(|e| e.to_string())?;
    let g = build_stnet(&cfg.stnet(data_cfg.num_classes)).map_err(|e| e.to_string())?;
    let p = init_stnet_params::<f32>(&g, RngStream::new(1), None).map_err(|e| e.to_string())?;
    let opt = OptimCfg { epochs: 1, batch_size: 8, ..cfg.optim.clone() };
    let src = |segments| ClipSource { data: &data.train, n_frames: cfg.n_frames, segments, norm: None };
    let trained = train(&g.graph, p, &src(cfg.t_train), &opt).map_err(|e| e.to_string())?;
    let test = |segments| ClipSource { data: &data.test, n_frames: cfg.n_frames, segments, norm: None };
    let mut evals = Vec::new();
    for t in [cfg.t_train, cfg.t_eval] {
        let r = evaluate(&g.graph, &trained.params, &test(t), 4, 1).map_err(|e| format!("eval at T={t}: {e}"))?;
        if r.samples != data_cfg.n_test || !r.loss.is_finite() {
            return Err(format!("eval at T={t} gave {} samples, loss {}", r.samples, r.loss));
        }
        evals.push(format!("T={t} top1 {:.2}", r.top1));
    }

    // Parameter accounting against the C_i = 64 configuration.
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/describe_c64.json");
    let c64 = RunConfig::load(std::path::Path::new(path)).map_err(|e| e.to_string())?;
    let g64 = build_stnet(&c64.stnet(400)).map_err(|e| e.to_string())?;
    let d = g64.describe(7, 224, 224).map_err(|e| e.to_string())?;
    let c = 64;
    let block_formula = 3 * c * c + c + 2 * c;
    let total_formula: usize = g64.graph.layers.iter().map(|l| closed_form(&l.kind)).sum();
    let rows_ok = d.graph.layers.iter().zip(&g64.graph.layers).all(|(row, l)| row.params == closed_form(&l.kind));
    let t3 = d.graph.block_params.get("temporal3").copied().unwrap_or(0);
    ensure(
        t3 == 12_480 && block_formula == 12_480 && d.graph.total_params == total_formula && rows_ok,
        format!(
            "trained at T={} then evaluated without rebuild ({}); describe: temporal3 = {t3} (closed form {block_formula}), \
             total {} (closed form {total_formula}), per-layer counts {}",
            cfg.t_train,
            evals.join(", "),
            d.graph.total_params,
            if rows_ok { "match" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------------------
// training ablations

struct Run {
    report: AblationReport,
    bytes: Vec<u8>,
    elapsed: Duration,
}

fn run(name: &str, seed: u64) -> Result<Run, String> {
    let cfg = RunConfig { seed, ..RunConfig::default() };
    let t0 = Instant::now();
    let out = run_ablation::<f32>(name, &cfg, seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
    let elapsed = t0.elapsed();
    let bytes = serde_json::to_vec_pretty(&out.report).map_err(|e| e.to_string())?;
    Ok(Run { report: out.report, bytes, elapsed })
}

#[derive(Default)]
struct Runs {
    first: BTreeMap<(String, u64), Run>,
}

impl Runs {
    fn get(&mut self, name: &str, seed: u64) -> Result<&Run, String> {
        let key = (name.to_string(), seed);
        if !self.first.contains_key(&key) {
            let r = run(name, seed)?;
            self.first.insert(key.clone(), r);
        }
        Ok(&self.first[&key])
    }
}

fn prec1(r: &AblationReport, model: &str) -> Result<f64, String> {
    r.row(model).map(|row| row.prec1).ok_or_else(|| format!("no `{model}` row"))
}

fn stnet_vs_tsn(runs: &mut Runs) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let run = runs.get("stnet_vs_tsn", seed)?;
        let (st, tsn) = (prec1(&run.report, "StNet")?, prec1(&run.report, "TSN-baseline")?);
        ok &= st >= 0.90 && tsn <= 0.30 && run.elapsed < RUN_BUDGET;
        parts.push(format!("seed {seed}: StNet {st:.3} TSN {tsn:.3} ({})", secs(run.elapsed)));
    }
    ensure(ok, format!("{} [need StNet >= 0.90, TSN <= 0.30]", parts.join("; ")))
}

fn itxn_vs_single(runs: &mut Runs) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let run = runs.get("itxn_vs_single", seed)?;
        let r = &run.report;
        let itxn = prec1(r, "iTXN")?;
        let ens = prec1(r, "Ensemble(single)")?;
        let singles: Vec<(String, f64)> = r.rows.iter().filter(|row| row.model.starts_with("TXN(")).map(|row| (row.model.clone(), row.prec1)).collect();
        let best = singles.iter().map(|s| s.1).fold(0.0, f64::max);
        ok &= itxn >= 0.90 && !singles.is_empty() && best <= 0.60 && ens >= best && run.elapsed < RUN_BUDGET;
        parts.push(format!("seed {seed}: iTXN {itxn:.3}, best single {best:.3}, ensemble {ens:.3} ({})", secs(run.elapsed)));
    }
    ensure(ok, format!("{} [need iTXN >= 0.90, singles <= 0.60, ensemble >= best single]", parts.join("; ")))
}

fn determinism(runs: &mut Runs) -> Check {
    let mut same = 0;
    let mut differ = Vec::new();
    for name in ["stnet_vs_tsn", "itxn_vs_single"] {
        for seed in SEEDS {
            let again = run(name, seed)?;
            if runs.get(name, seed)?.bytes == again.bytes {
                same += 1;
            } else {
                differ.push(format!("{name} seed {seed}"));
            }
        }
    }
    ensure(
        differ.is_empty(),
        if differ.is_empty() {
            format!("{same} ablation runs repeated with byte-identical report.json")
        } else {
            format!("report.json differs on rerun: {}", differ.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut runs = Runs::default();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Runs) -> Check>)> = vec![
        ("gradient correctness", Box::new(|_| gradients())),
        ("oracle equivalence", Box::new(|_| oracles())),
        ("init invariants", Box::new(|_| init_invariants())),
        ("shape and regime contract", Box::new(|_| shape_contract())),
        ("temporal order: StNet vs TSN", Box::new(stnet_vs_tsn)),
        ("multimodal XOR: iTXN vs single modality", Box::new(itxn_vs_single)),
        ("determinism", Box::new(determinism)),
    ];

    let mut failures = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.to_lowercase().contains(&f.to_lowercase())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut runs))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name} [{}]: {detail}", secs(t0.elapsed()));
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
