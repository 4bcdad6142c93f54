//! Seeded random cases comparing the optimized kernels with the references.

use super::*;
use stnet::kernels::*;
use stnet::rng::{RngStream, StreamRng};
use stnet::Tensor;

/// Ops checked, each as `(name, runner)`.
pub const OPS: [(&str, fn(u64) -> Worst); 6] = [
    ("conv forward", conv_forward_cases),
    ("conv backward", conv_backward_cases),
    ("pool", pool_cases),
    ("global pool", global_pool_cases),
    ("batchnorm", batchnorm_cases),
    ("linear", linear_cases),
];

fn rng(op: &str, case: u64) -> StreamRng {
    RngStream::new(case).named("oracle").named(op).rng()
}

fn pick(rng: &mut StreamRng, lo: usize, hi: usize) -> usize {
    lo + rng.below_inclusive(hi - lo)
}

/// Tracks the worst normwise error over all cases and outputs of one op.
#[derive(Default)]
pub struct Worst {
    pub err: f64,
    pub at: String,
}

impl Worst {
    fn check(&mut self, what: &str, case: u64, got: &Tensor<f64>, want: &Tensor<f64>) {
        let err = max_rel_diff(got, want);
        if !(err <= self.err) {
            self.err = err;
            self.at = format!("{what} case {case}");
        }
    }
}

fn vec_t(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![n], v).unwrap()
}

/// Random conv problem of spatial rank 1..=3 with groups, stride and padding.
fn conv_case(r: &mut StreamRng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, ConvGeom) {
    let rank = pick(r, 1, 3);
    let groups = pick(r, 1, 3);
    let cin = groups * pick(r, 1, 2);
    let cout = groups * pick(r, 1, 3);
    let batch = pick(r, 1, 2);
    let mut xs = vec![batch, cin];
    let mut ws = vec![cout, cin / groups];
    let (mut stride, mut padding) = (vec![], vec![]);
    for _ in 0..rank {
        let k = pick(r, 1, 3);
        let p = pick(r, 0, k - 1);
        let size = pick(r, k.max(2), if rank == 3 { 5 } else { 8 });
        xs.push(size);
        ws.push(k);
        padding.push(p);
        stride.push(pick(r, 1, 2));
    }
    let x = randn(&xs, r);
    let w = randn(&ws, r);
    let b = randn(&[cout], r);
    (x, w, b, ConvGeom { stride, padding, groups })
}

fn params(g: &ConvGeom) -> ConvParams {
    ConvParams {
        stride: g.stride.clone(),
        padding: g.padding.clone(),
        groups: g.groups,
    }
}

pub fn conv_forward_cases(cases: u64) -> Worst {
    let mut worst = Worst::default();
    for case in 0..cases {
        let mut r = rng("conv", case);
        let (x, w, b, g) = conv_case(&mut r);
        let got = conv_forward(&x, &w, Some(&b), &params(&g)).unwrap();
        worst.check("conv", case, &got, &conv(&x, &w, Some(&b), &g));
        let got = conv_forward(&x, &w, None, &params(&g)).unwrap();
        worst.check("conv no bias", case, &got, &conv(&x, &w, None, &g));
    }
    worst
}

pub fn conv_backward_cases(cases: u64) -> Worst {
    let mut worst = Worst::default();
    for case in 0..cases {
        let mut r = rng("conv_bwd", case);
        let (x, w, b, g) = conv_case(&mut r);
        let y = conv(&x, &w, Some(&b), &g);
        let dy = randn(y.shape(), &mut r);
        let got = conv_backward(&x, &w, &dy, &params(&g), true).unwrap();
        let (dx, dw, db) = conv_grads(&x, &w, &dy, &g);
        worst.check("conv dx", case, got.dx.as_ref().unwrap(), &dx);
        worst.check("conv dw", case, &got.dw, &dw);
        worst.check("conv db", case, &got.db, &db);
    }
    worst
}

fn pool_case(r: &mut StreamRng) -> (Tensor<f64>, Vec<usize>, Vec<usize>) {
    let rank = pick(r, 1, 3);
    let mut xs = vec![pick(r, 1, 2), pick(r, 1, 3)];
    let (mut win, mut st) = (vec![], vec![]);
    for _ in 0..rank {
        let size = pick(r, 1, if rank == 3 { 5 } else { 8 });
        xs.push(size);
        win.push(pick(r, 1, size.min(3)));
        st.push(pick(r, 1, 3));
    }
    (randn(&xs, r), win, st)
}

pub fn pool_cases(cases: u64) -> Worst {
    let mut worst = Worst::default();
    for case in 0..cases {
        let mut r = rng("pool", case);
        let (x, win, st) = pool_case(&mut r);
        for (kind, is_max) in [(PoolKind::Max, true), (PoolKind::Avg, false)] {
            let out = pool_forward(&x, kind, &win, &st).unwrap();
            worst.check("pool", case, &out.y, &pool(&x, &win, &st, is_max));
            let dy = randn(out.y.shape(), &mut r);
            let dx = pool_backward(x.shape(), &dy, kind, &win, &st, out.argmax.as_deref()).unwrap();
            worst.check("pool grad", case, &dx, &pool_grad(&x, &win, &st, is_max, &dy));
        }
    }
    worst
}

pub fn global_pool_cases(cases: u64) -> Worst {
    let mut worst = Worst::default();
    for case in 0..cases {
        let mut r = rng("global_pool", case);
        let (x, _, _) = pool_case(&mut r);
        for (kind, is_max) in [(PoolKind::Max, true), (PoolKind::Avg, false)] {
            let out = global_pool_forward(&x, kind).unwrap();
            worst.check("global pool", case, &out.y, &global_pool(&x, is_max));
        }
    }
    worst
}

pub fn batchnorm_cases(cases: u64) -> Worst {
    let mut worst = Worst::default();
    let cfg = BnConfig::default();
    for case in 0..cases {
        let mut r = rng("bn", case);
        let rank = pick(&mut r, 0, 3);
        let c = pick(&mut r, 1, 4);
        let mut xs = vec![pick(&mut r, 2, 4), c];
        xs.extend((0..rank).map(|_| pick(&mut r, 1, 4)));
        let x = randn(&xs, &mut r);
        let gamma: Vec<f64> = (0..c).map(|_| r.uniform_range(0.5, 1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| r.normal()).collect();
        let rm: Vec<f64> = (0..c).map(|_| r.normal()).collect();
        let rv: Vec<f64> = (0..c).map(|_| r.uniform_range(0.5, 2.0)).collect();
        let t = |v: &[f64]| vec_t(v.to_vec());

        let train = batchnorm_forward(&x, &t(&gamma), &t(&beta), &t(&rm), &t(&rv), Mode::Train, cfg).unwrap();
        let want = batchnorm(&x, &gamma, &beta, &rm, &rv, true, cfg.eps, cfg.momentum);
        worst.check("bn train", case, &train.y, &want.y);
        let (got_m, got_v) = train.running.as_ref().unwrap();
        worst.check("bn running mean", case, got_m, &t(&want.run_mean));
        worst.check("bn running var", case, got_v, &t(&want.run_var));

        let dy = randn(&xs, &mut r);
        let grads = batchnorm_backward(&dy, &t(&gamma), &train.saved).unwrap();
        let (dx, dg, db) = batchnorm_train_grads(&x, &gamma, &dy, cfg.eps);
        worst.check("bn dx", case, &grads.dx, &dx);
        worst.check("bn dgamma", case, &grads.dgamma, &t(&dg));
        worst.check("bn dbeta", case, &grads.dbeta, &t(&db));

        let eval = batchnorm_forward(&x, &t(&gamma), &t(&beta), &t(&rm), &t(&rv), Mode::Eval, cfg).unwrap();
        let want = batchnorm(&x, &gamma, &beta, &rm, &rv, false, cfg.eps, cfg.momentum);
        worst.check("bn eval", case, &eval.y, &want.y);
        assert!(eval.running.is_none());
    }
    worst
}

pub fn linear_cases(cases: u64) -> Worst {
    let mut worst = Worst::default();
    for case in 0..cases {
        let mut r = rng("linear", case);
        let (b, d, o) = (pick(&mut r, 1, 5), pick(&mut r, 1, 9), pick(&mut r, 1, 6));
        let x = randn(&[b, d], &mut r);
        let w = randn(&[d, o], &mut r);
        let bias = randn(&[o], &mut r);
        worst.check("linear", case, &linear_forward(&x, &w, &bias).unwrap(), &linear(&x, &w, &bias));
    }
    worst
}
