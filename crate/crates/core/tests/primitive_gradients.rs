//! Finite-difference checks for every differentiable primitive.

use aapt_core::gradcheck::primitive_suite;

#[test]
fn every_primitive_matches_finite_differences() {
    let suite = primitive_suite().unwrap();
    assert!(suite.len() >= 24);
    for (name, err) in suite {
        assert!(err < 1e-3, "{name}: rel err {err}");
    }
}
