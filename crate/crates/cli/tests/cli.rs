use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/ref21.json")
}

fn feederflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feederflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = feederflow(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_feeder_flag_is_a_domain_error() {
    let out = feederflow(&["validate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--feeder"));
}

#[test]
fn malformed_feeder_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = feederflow(&["validate", "--feeder", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn validate_writes_findings_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = feederflow(&[
        "validate",
        "--feeder",
        fixture().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let findings = read(dir.path(), "findings.txt");
    assert!(findings.contains("21 buses") && findings.contains("20 sections"));
    let manifest = read(dir.path(), "manifest.json");
    assert!(manifest.contains("run-manifest v1"));
}

#[test]
fn no_load_powerflow_is_flat_at_the_slack_setpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = feederflow(&[
        "powerflow",
        "--feeder",
        fixture().to_str().unwrap(),
        "--no-load",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "powerflow.csv");
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# schema:"));
    assert_eq!(lines.next().unwrap(), "bus,conductor,v_lin_pu,v_fix_pu");
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (v_lin, v_fix): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        if f[1] == "n" {
            assert!(v_lin.abs() < 1e-9 && v_fix.abs() < 1e-9);
        } else {
            assert!((v_lin - 1.01).abs() < 1e-9, "{line}");
            assert!((v_fix - 1.01).abs() < 1e-9, "{line}");
        }
    }
}

#[test]
fn train_reports_perfect_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = feederflow(&["train", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model: serde_json::Value = serde_json::from_str(&read(dir.path(), "model.json")).unwrap();
    assert_eq!(model["schema"], "classifier v1");
    assert_eq!(model["model"]["report"]["train_accuracy"], 100.0);
    let labels = read(dir.path(), "labels.csv");
    // schema comment + header + 20 reference rows
    assert_eq!(labels.lines().count(), 22);
}

#[test]
fn manifest_rerun_reproduces_outputs_byte_identically() {
    let first = tempfile::tempdir().unwrap();
    let out = feederflow(&[
        "powerflow",
        "--feeder",
        fixture().to_str().unwrap(),
        "--out",
        first.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let original = read(first.path(), "powerflow.csv");
    let manifest_path = first.path().join("manifest.json");

    let second = tempfile::tempdir().unwrap();
    let out = feederflow(&[
        "powerflow",
        "--config",
        manifest_path.to_str().unwrap(),
        "--out",
        second.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(second.path(), "powerflow.csv"), original);
}

#[test]
fn widening_the_ambiguity_radius_never_cheapens_the_schedule() {
    let solve = |radius: &str| -> f64 {
        let dir = tempfile::tempdir().unwrap();
        let out = feederflow(&[
            "opf",
            "--feeder",
            fixture().to_str().unwrap(),
            "--radius",
            radius,
            "--days",
            "2",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let doc: serde_json::Value = serde_json::from_str(&read(dir.path(), "opf.json")).unwrap();
        doc["objective"]["total"].as_f64().unwrap()
    };
    let tight = solve("0");
    let wide = solve("0.05");
    assert!(wide >= tight - 1e-9, "radius 0 -> {tight}, radius 0.05 -> {wide}");
}
