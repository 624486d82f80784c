use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ihcube(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ihcube"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn generate_build_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ihcube(
        &["generate", "splom", "--rows", "5000", "--dims", "3", "--out", "s.csv"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5001);
    assert_eq!(csv.lines().next(), Some("d1,d2,d3"));

    let built = ok_json(ihcube(
        &["build", "--config", "s.toml", "--csv", "s.csv", "--out", "s.ihx"],
        d,
    ));
    assert_eq!(built["rows"], 5000);
    assert_eq!(built["skipped"], 0);
    let file_len = fs::metadata(d.join("s.ihx")).unwrap().len();
    assert_eq!(built["stats"]["storage_bytes"], file_len);

    let stats = ok_json(ihcube(&["stats", "--index", "s.ihx"], d));
    assert_eq!(stats, built["stats"]);
    let schema = ok_json(ihcube(&["schema", "--index", "s.ihx"], d));
    assert_eq!(schema["dimensions"].as_array().unwrap().len(), 3);

    fs::write(d.join("q.json"), r#"{"group": [{"dim": "d2", "bins": 5}]}"#).unwrap();
    let r = ok_json(ihcube(&["query", "--index", "s.ihx", "--request", "q.json"], d));
    assert_eq!(r["shape"], serde_json::json!([5]));
    let total: f64 = r["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert_eq!(total, 5000.0);

    // Same request, same bytes.
    let again = ihcube(&["query", "--index", "s.ihx", "--request", "q.json"], d);
    let first = ihcube(&["query", "--index", "s.ihx", "--request", "q.json"], d);
    assert_eq!(again.stdout, first.stdout);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ihcube(&["generate", "skewed", "--rows", "100", "--out", "k.csv"], d)
        .status
        .success());
    assert!(
        ihcube(&["build", "--config", "k.toml", "--csv", "k.csv", "--out", "k.ihx"], d)
            .status
            .success()
    );

    fs::write(d.join("bad.json"), r#"{"filter": {"z": [0, 1]}}"#).unwrap();
    let out = ihcube(&["query", "--index", "k.ihx", "--request", "bad.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter.z"));

    let out = ihcube(&["stats", "--index", "missing.ihx"], d);
    assert!(!out.status.success());

    let out = ihcube(&["generate", "skewed", "--dims", "3", "--out", "x.csv"], d);
    assert!(!out.status.success());

    let out = ihcube(&["bench", "warp_speed", "--out", "r"], d);
    assert!(!out.status.success());
}

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("bench.toml"),
        r#"
[scale_alignment]
dataset = { rows = 20000 }
workload = { queries = 20, bins = [4, 12] }
"#,
    )
    .unwrap();
    let out = ihcube(
        &["bench", "scale_alignment", "--config", "bench.toml", "--out", "reports"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"), "{text}");
    let json: Value =
        serde_json::from_str(&fs::read_to_string(d.join("reports/scale_alignment.json")).unwrap()).unwrap();
    assert_eq!(json["experiment"], "scale_alignment");
    assert!(d.join("reports/scale_alignment.txt").exists());
    assert!(fs::read_dir(d.join("reports")).unwrap().any(|e| e
        .unwrap()
        .path()
        .extension()
        .is_some_and(|x| x == "tsv")));
}
