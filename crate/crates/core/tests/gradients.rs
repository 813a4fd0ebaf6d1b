mod common;

use common::{check_model, check_prim, GRAD_TOL, PRIMS};
use parapath::config::ConnectionKind;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for &p in PRIMS {
        for seed in 0..5 {
            let r = check_prim(p, seed).unwrap_or_else(|e| panic!("{p:?} seed {seed}: {e}"));
            if !r.passes(GRAD_TOL) {
                failures.push(format!("{p:?} seed {seed}: {:.2e} at {:?}", r.max_rel_err, r.worst));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn every_model_variant_matches_finite_differences() {
    for kind in [
        ConnectionKind::None,
        ConnectionKind::ShareLinear,
        ConnectionKind::GumbelV1,
        ConnectionKind::GumbelV2,
    ] {
        for seed in 0..5 {
            let r = check_model::<f32>(kind, seed).unwrap();
            assert!(r.passes(GRAD_TOL), "{kind:?} seed {seed}: {:.2e} at {:?}", r.max_rel_err, r.worst);
        }
    }
}

#[test]
fn model_gradients_agree_tightly_in_f64() {
    for kind in [ConnectionKind::ShareLinear, ConnectionKind::GumbelV1, ConnectionKind::GumbelV2] {
        let r = check_model::<f64>(kind, 0).unwrap();
        assert!(r.passes(1e-4), "{kind:?}: {:.2e} at {:?}", r.max_rel_err, r.worst);
    }
}
