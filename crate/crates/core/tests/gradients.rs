use diat_core::selfcheck::{loss_cases, op_cases, run_cases, DEFAULT_EPS, DEFAULT_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let results = run_cases(&op_cases(), 20, 11, DEFAULT_EPS, None).unwrap();
    for r in &results {
        println!("{:<24} {:.3e}", r.name, r.max_rel_error);
    }
    for r in &results {
        assert!(r.passed(DEFAULT_TOLERANCE), "{} max rel error {:.3e}", r.name, r.max_rel_error);
    }
}

#[test]
fn every_loss_matches_finite_differences() {
    let results = run_cases(&loss_cases(), 20, 12, DEFAULT_EPS, None).unwrap();
    for r in &results {
        println!("{:<24} {:.3e}", r.name, r.max_rel_error);
    }
    for r in &results {
        assert!(r.passed(DEFAULT_TOLERANCE), "{} max rel error {:.3e}", r.name, r.max_rel_error);
    }
}

/// The suite must not depend on lucky draws: fresh seeds pass as well.
#[test]
fn suite_passes_under_other_seeds() {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    for seed in [101, 202, 303] {
        for r in run_cases(&cases, 20, seed, DEFAULT_EPS, None).unwrap() {
            assert!(r.passed(DEFAULT_TOLERANCE), "seed {seed}: {} max rel error {:.3e}", r.name, r.max_rel_error);
        }
    }
}
