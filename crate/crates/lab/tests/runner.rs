use ens_lab::{list_scenarios, run, run_all, LabError, RunOptions};

#[test]
fn run_reports_expected_examples() {
    let opts = RunOptions {
        seed: 42,
        ..RunOptions::default()
    };
    let honest = run("honest.robert", &opts).unwrap();
    assert!(honest.pass && honest.violations.is_empty());

    let x2 = run("robert.X2", &opts).unwrap();
    assert!(x2.pass);
    assert_eq!(x2.patterns().iter().map(|p| p.label()).collect::<Vec<_>>(), ["X2"]);

    let c2 = run("cwa.C2.mitigated", &opts).unwrap();
    assert!(c2.pass && c2.violations.is_empty());
}

#[test]
fn override_can_break_an_expectation() {
    let opts = RunOptions {
        seed: 42,
        overrides: vec!["cwa.one_tan_per_token=false".into()],
        trace_out: None,
    };
    let r = run("cwa.C2.mitigated", &opts).unwrap();
    assert!(!r.pass);
    assert!(!r.violations.is_empty());
}

#[test]
fn errors() {
    let opts = RunOptions::default();
    assert!(matches!(run("robert.X9", &opts), Err(LabError::Scenario(_))));
    let bad = RunOptions {
        overrides: vec!["nope=1".into()],
        ..RunOptions::default()
    };
    assert!(matches!(run("honest.cwa", &bad), Err(LabError::Config(_))));
    assert!(matches!(run_all(Some("[x"), 1, None), Err(LabError::Filter(_))));
}

#[test]
fn filters() {
    let dp3t = run_all(Some("dp3t.*"), 42, None).unwrap();
    assert_eq!(dp3t.total, 10);
    assert!(dp3t.all_passed());
    let none = run_all(Some("nothing.*"), 42, None).unwrap();
    assert_eq!(none.total, 0);
    assert!(none.runs.is_empty());
    assert_eq!(list_scenarios().len(), run_all(None, 1, None).unwrap().total);
}

#[test]
fn other_seeds_pass_too() {
    for seed in [1, 7, 1234] {
        let s = run_all(None, seed, None).unwrap();
        let failed: Vec<_> = s.runs.iter().filter(|r| !r.pass).map(|r| r.summary_line()).collect();
        assert!(failed.is_empty(), "seed {seed}: {failed:?}");
    }
}
