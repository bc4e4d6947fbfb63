mod common;

use common::{attention_model_check, blstm_model_check, layer_checks, TOLERANCE};

#[test]
fn every_tape_operation_matches_finite_differences() {
    for seed in 0..3 {
        for (name, r) in layer_checks(seed) {
            assert!(r.max_relative_error < TOLERANCE, "{name} seed {seed}: {r:?}");
            assert!(r.max_element_error < TOLERANCE, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn blstm_regressor_gradient() {
    for seed in 0..2 {
        let r = blstm_model_check(seed);
        assert!(r.max_relative_error < TOLERANCE, "seed {seed}: {r:?}");
        // element-wise disagreement stays at the level of finite-difference roundoff
        assert!(r.max_abs_error < 1e-9, "seed {seed}: {r:?}");
    }
}

#[test]
fn attention_model_gradient() {
    let r = attention_model_check(0);
    assert!(r.max_relative_error < TOLERANCE, "{r:?}");
}
