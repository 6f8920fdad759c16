use ssgan_core::gradcheck::{run_suite, Precision, SuiteOptions, CHECK_NAMES};

#[test]
fn every_check_passes_in_double_precision() {
    let results = run_suite(&SuiteOptions::default()).unwrap();
    assert_eq!(results.len(), CHECK_NAMES.len());
    for r in &results {
        println!("{:<26} {:.3e}", r.name, r.max_error);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn single_precision_passes_its_coarser_threshold() {
    let opts = SuiteOptions { trials: 20, precision: Precision::Single, ..SuiteOptions::default() };
    for r in run_suite(&opts).unwrap() {
        println!("{:<26} {:.3e}", r.name, r.max_error);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn every_fault_injection_is_detected() {
    for &name in CHECK_NAMES {
        let opts = SuiteOptions {
            trials: 3,
            only: vec![name.into()],
            inject_fault: Some(name.into()),
            ..SuiteOptions::default()
        };
        let r = &run_suite(&opts).unwrap()[0];
        assert!(!r.passed(), "negated gradient of {name} went unnoticed");
    }
}

#[test]
fn unknown_check_is_rejected() {
    let opts = SuiteOptions { only: vec!["nope".into()], ..SuiteOptions::default() };
    assert!(run_suite(&opts).is_err());
}
