//! Analytic gradients against central finite differences on small models.

mod common;

#[test]
fn every_parameter_of_every_micro_model() {
    let cases = common::micro_cases();
    assert!(cases.len() >= 6);
    for case in &cases {
        let (checked, _) = common::check_gradients(case).unwrap();
        assert_eq!(checked, case.model.param_count());
    }
}
