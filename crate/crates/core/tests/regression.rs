use optexec::regression::*;

#[test]
fn cheap_fixtures_pass_through_run_all() {
    let fixtures: Vec<Fixture> =
        load_fixtures(FIXTURE_DIR).unwrap().into_iter().filter(|f| matches!(f.criterion, Some(1..=4))).collect();
    let report = run_all(&fixtures);
    assert_eq!(report.entries.len(), 4);
    assert!(report.entries.windows(2).all(|w| w[0].name < w[1].name));
    assert!(report.all_passed(), "{}", report.to_table());
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["entries"].as_array().unwrap().len(), 4);
}

#[test]
fn errors_become_failed_entries() {
    let mut f = load_fixtures(FIXTURE_DIR).unwrap().remove(0);
    f.params[0].mu = 0.2;
    let e = run_fixture(&f);
    assert!(!e.passed);
    assert!(e.detail.starts_with("error:"));
}

#[test]
fn every_expected_value_names_its_source() {
    for f in load_fixtures(FIXTURE_DIR).unwrap() {
        for e in &f.expected {
            assert!(!e.source.is_empty(), "{}", f.name);
        }
    }
}
