#[path = "support/gradient_suite.rs"]
mod suite;

use std::sync::Arc;

use vipa_core::nn::{ParamStore, Session};
use vipa_core::Tensor;

#[test]
fn every_operation_matches_finite_differences() {
    for (name, check) in suite::OPERATIONS {
        let err = check();
        assert!(err <= suite::TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn end_to_end_probe_parameters() {
    for (name, err) in suite::end_to_end_probe_parameters() {
        assert!(err <= suite::PROBE_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn bce_targets_are_shared_not_copied() {
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store, false);
    let x = s.constant(Tensor::zeros(&[1, 4]));
    let t = Arc::new(vec![1.0, 0.0, 1.0, 0.0]);
    let l = s.tape.bce_with_logits(x, t.clone()).unwrap();
    assert!((s.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(Arc::strong_count(&t), 2);
}
