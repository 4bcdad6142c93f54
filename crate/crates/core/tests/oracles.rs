//! Optimized kernels against the direct-loop references in `common`, in f64.

mod common;

use common::cases;

const CASES: u64 = 100;
const TOL: f64 = 1e-12;

fn within_tolerance(run: fn(u64) -> cases::Worst) {
    let w = run(CASES);
    assert!(w.err <= TOL, "{}: normwise rel err {:e}", w.at, w.err);
}

#[test]
fn conv_forward_matches_reference() {
    within_tolerance(cases::conv_forward_cases);
}

#[test]
fn conv_backward_matches_reference() {
    within_tolerance(cases::conv_backward_cases);
}

#[test]
fn pooling_matches_reference() {
    within_tolerance(cases::pool_cases);
}

#[test]
fn global_pooling_matches_reference() {
    within_tolerance(cases::global_pool_cases);
}

#[test]
fn batchnorm_matches_reference() {
    within_tolerance(cases::batchnorm_cases);
}

#[test]
fn linear_matches_reference() {
    within_tolerance(cases::linear_cases);
}
