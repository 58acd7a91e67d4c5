use std::path::Path;
use std::process::Command;

use qpt_core::model::{sample_model, save_spec};
use serde_json::Value;

fn qpt(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qpt")).args(args).env("QPT_OUTPUT_DIR", out).output().expect("binary runs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn melnikov_on_sample_model() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sample.json");
    save_spec(&sample_model(), &spec).unwrap();
    let out = dir.path().join("out");
    let o = qpt(&["--spec", spec.to_str().unwrap(), "melnikov", "--K", "1"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&out.join("melnikov.json"));
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["spec_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(doc["result"]["melnikov"]["k0"], 1);
    let zeros: Vec<f64> = doc["result"]["melnikov"]["zeros"].as_array().unwrap().iter().map(|z| z["beta"].as_f64().unwrap()).collect();
    assert_eq!(zeros.len(), 2);
    assert!(zeros[0].abs() < 1e-9);
    assert!((zeros[1] - std::f64::consts::PI).abs() < 1e-9);
}

#[test]
fn missing_spec_writes_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = dir.path().join("out");
    let o = qpt(&["--spec", missing.to_str().unwrap(), "series"], &out);
    assert_eq!(o.status.code(), Some(2));
    let rec = read_json(&out.join("error.json"));
    assert_eq!(rec["error"]["kind"], "spec.io");
    assert_eq!(rec["error"]["path"], missing.to_str().unwrap());
}

#[test]
fn malformed_spec_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, "{ not json").unwrap();
    let out = dir.path().join("out");
    let o = qpt(&["--spec", spec.to_str().unwrap(), "series"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(read_json(&out.join("error.json"))["error"]["kind"], "spec.parse");
}

#[test]
fn caps_reject_large_orders() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sample.json");
    save_spec(&sample_model(), &spec).unwrap();
    let out = dir.path().join("out");
    let o = qpt(&["--spec", spec.to_str().unwrap(), "trees", "--k-tree", "5"], &out);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(read_json(&out.join("error.json"))["error"]["kind"], "config");
}

#[test]
fn full_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sample.json");
    save_spec(&sample_model(), &spec).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = qpt(&["--spec", spec.to_str().unwrap(), "all"], out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    }
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["stages"].as_array().unwrap().len(), 7);
    for name in ["profile", "series", "melnikov", "trees", "selfenergy", "solve", "sweep", "summary"] {
        let f = format!("{name}.json");
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sample.json");
    save_spec(&sample_model(), &spec).unwrap();
    let out = dir.path().join("out");
    let o = qpt(&["--spec", spec.to_str().unwrap(), "series", "--format", "csv", "--k", "3"], &out);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("k,range_residual"));
}
