use biden::gradcheck::{gradcheck, GradcheckOptions};
use biden::numkit::GradFault;

#[test]
fn every_pipeline_matches_finite_differences() {
    let report = gradcheck(&GradcheckOptions::default()).unwrap();
    for p in &report.pipelines {
        let worst = p.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
        println!(
            "{:<24} n={:<3} max rel err {:.2e} ({})",
            p.pipeline, p.tokens, p.max_rel_err, worst.name
        );
        assert!(p.tokens <= 10);
    }
    assert!(report.passed, "max rel err {:e}", report.max_rel_err);
}

#[test]
fn report_is_bit_stable() {
    let a = serde_json::to_string(&gradcheck(&GradcheckOptions::default()).unwrap()).unwrap();
    let b = serde_json::to_string(&gradcheck(&GradcheckOptions::default()).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn planted_faults_are_detected() {
    for fault in [
        GradFault::LayerNormGamma,
        GradFault::TanhScale,
        GradFault::SoftmaxCenter,
    ] {
        let report = gradcheck(&GradcheckOptions {
            fault: Some(fault),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!report.passed, "{fault:?} went unnoticed");
    }
}
