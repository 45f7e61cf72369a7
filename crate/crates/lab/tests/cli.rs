use std::fs;
use std::process::Command;

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ens-lab"))
}

#[test]
fn list_prints_ids() {
    let out = lab().arg("list").output().unwrap();
    assert!(out.status.success());
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.lines().any(|l| l == "robert.X3"));
    assert!(s.lines().any(|l| l == "honest.cwa"));
}

#[test]
fn run_writes_ndjson_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ndjson");
    let out = lab()
        .args(["run", "robert.X3", "--seed", "3", "--trace-out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["violations"][0]["pattern"], "X3");
    assert_eq!(report["violations"][0]["failed_conditions"][0], "c");
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with(r#"{"tick":0,"seq":0,"day":0,"epoch":0,"kind":"#), "{first}");
    assert!(text.lines().any(|l| l.contains(r#""kind":"PClaimAtRisk""#)));
}

#[test]
fn failing_expectation_exits_nonzero() {
    let out = lab()
        .args(["run", "cwa.C2.mitigated", "--config", "cwa.one_tan_per_token=false"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = lab().args(["run", "robert.X9"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn suite_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = lab()
        .args(["suite", "--filter", "cwa.*", "--report"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["failed"], 0);
    assert_eq!(report["total"], report["runs"].as_array().unwrap().len());
    assert!(report["runs"].as_array().unwrap().iter().all(|r| r["scenario"].as_str().unwrap().starts_with("cwa.")));
}
