//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line with the measured quantity and its bound.

use optexec::regression::{load_fixtures, run_fixture, Fixture, FIXTURE_DIR};

fn fixture(criterion: u32) -> Fixture {
    load_fixtures(FIXTURE_DIR)
        .unwrap()
        .into_iter()
        .find(|f| f.criterion == Some(criterion))
        .unwrap_or_else(|| panic!("no fixture for criterion {criterion}"))
}

fn check(criterion: u32) {
    let f = fixture(criterion);
    let e = run_fixture(&f);
    println!(
        "criterion {criterion:>2} {:<28} {} measured={:.4e} bound={:.4e} ({:.1}s) {}",
        e.name,
        if e.passed { "PASS" } else { "FAIL" },
        e.measured,
        e.bound,
        e.seconds,
        e.detail
    );
    assert!(e.passed, "criterion {criterion} failed: {e:?}");
}

#[test]
fn criterion_01_closed_form_equivalence() {
    check(1);
}

#[test]
fn criterion_02_bessel_ratio() {
    check(2);
}

#[test]
fn criterion_03_ode_residual() {
    check(3);
}

#[test]
fn criterion_04_boundary_layer() {
    check(4);
}

#[test]
fn criterion_05_hjb_agreement() {
    check(5);
}

#[test]
fn criterion_06_mc_optimality() {
    check(6);
}

#[test]
fn criterion_07_dominance() {
    check(7);
}

#[test]
fn criterion_08_martingale_regime() {
    check(8);
}

#[test]
fn criterion_09_positive_drift() {
    check(9);
}

#[test]
fn criterion_10_supermartingale() {
    check(10);
}

#[test]
fn criterion_11_scaling() {
    check(11);
}
