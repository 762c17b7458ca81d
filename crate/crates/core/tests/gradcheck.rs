use std::time::Instant;

use metacon::autodiff::{OpKind, ALL_OPS};
use metacon::gradcheck::{run, Scale};

#[test]
fn tiny_suite_passes_quickly() {
    let start = Instant::now();
    let report = run(Scale::Tiny, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    println!("{report}");
    assert!(report.passed(), "failures: {:?}", report.failures());
    assert!(secs < 60.0, "took {secs:.1}s");
    for name in [
        "primitive/matmul",
        "loss/contrastive-i2t",
        "loss/contrastive-symmetric",
        "loss/alignment",
        "loss/full-model",
        "meta/second-order-k1",
        "meta/second-order-k2",
        "meta/second-order-k3",
        "meta/first-vs-second@1e-6",
        "meta/first-vs-second@0.1",
    ] {
        assert!(report.checks.iter().any(|c| c.name == name), "missing {name}");
    }
}

#[test]
fn tiny_network_is_within_the_parameter_budget() {
    let model = Scale::Tiny.model();
    assert!(model.init_params::<f64>(0).numel() <= 50);
}

#[test]
fn every_differentiable_op_fault_is_detected() {
    for &op in ALL_OPS.iter() {
        if matches!(op, OpKind::Leaf | OpKind::Constant | OpKind::Step) {
            continue;
        }
        let report = run(Scale::Tiny, Some(op)).unwrap();
        assert!(!report.passed(), "sign flip in {} went unnoticed", op.name());
    }
}
