use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus/smoke")
}

fn scvd(ws: &Path, args: &[&str]) -> Output {
    scvd_with(ws, &smoke().join("manifest.bytecode.jsonl"), args)
}

fn scvd_with(ws: &Path, manifest: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scvd"))
        .arg("--workspace")
        .arg(ws)
        .arg("--manifest")
        .arg(manifest)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

#[test]
fn usage_errors_exit_one() {
    let ws = tempfile::tempdir().unwrap();
    assert_eq!(scvd(ws.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(scvd(ws.path(), &["--provider", "cloud", "ingest"]).status.code(), Some(1));
    assert_eq!(scvd(ws.path(), &["ablation", "--variants", "nope"]).status.code(), Some(1));
    assert_eq!(scvd(ws.path(), &["--help"]).status.code(), Some(0));
    let bad = ws.path().join("bad.toml");
    std::fs::write(&bad, "[split]\ntest_fraction = 2.0\n").unwrap();
    let out = scvd(ws.path(), &["--config", bad.to_str().unwrap(), "ingest"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingest_reports_histogram() {
    let ws = tempfile::tempdir().unwrap();
    let out = scvd(ws.path(), &["--json", "ingest"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["records"], 30);
    assert_eq!(v["class_histogram"]["reentrancy"], 10);
    assert!(ws.path().join("ingest.json").is_file());
}

#[test]
fn clean_writes_beside_originals() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.sol");
    std::fs::write(&src, "// note\ncontract A {  /* x */ uint x; }\n").unwrap();
    let out = scvd(dir.path(), &["clean", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cleaned = std::fs::read_to_string(dir.path().join("a.clean.sol")).unwrap();
    assert!(!cleaned.contains("note") && !cleaned.contains("x */") && cleaned.contains("contract A"));
    let again = scvd(dir.path(), &["--json", "clean", dir.path().to_str().unwrap()]);
    assert_eq!(stdout_json(&again).as_array().unwrap().len(), 1);
}

#[test]
fn features_threshold_sets_exit_code() {
    let ws = tempfile::tempdir().unwrap();
    let manifest = ws.path().join("m.jsonl");
    let mut text = std::fs::read_to_string(smoke().join("manifest.bytecode.jsonl")).unwrap();
    text = text.replace("\"contracts/", &format!("\"{}/", smoke().join("contracts").display()));
    text.push_str(r#"{"id": "gone", "source_path": "missing.sol", "label": "clean", "provenance": "local"}"#);
    text.push('\n');
    std::fs::write(&manifest, text).unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["--json", "features"];
        args.extend_from_slice(extra);
        scvd_with(&ws.path().join("ws"), &manifest, &args)
    };
    let ok = run(&[]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(stdout_json(&ok)["failed"][0]["id"], "gone");
    let strict = run(&["--threshold", "0.01"]);
    assert_eq!(strict.status.code(), Some(2));
    assert_eq!(stdout_json(&strict)["skipped"], 30);
}

#[test]
fn train_then_predict_json() {
    let ws = tempfile::tempdir().unwrap();
    let feat = scvd(ws.path(), &["--workers", "2", "features"]);
    assert!(feat.status.success(), "{}", String::from_utf8_lossy(&feat.stderr));
    let train = scvd(ws.path(), &["--json", "train", "--variant", "gnn", "--epochs", "1"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ckpt = stdout_json(&train)["checkpoint"].as_str().unwrap().to_string();

    let contract = smoke().join("contracts/clean_00.sol");
    let line = std::fs::read_to_string(smoke().join("manifest.bytecode.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().find(|l| l.contains("clean_00")).unwrap()).unwrap();
    let bytecode = rec["bytecode"].as_str().unwrap();
    let out = scvd(
        ws.path(),
        &["--json", "predict", "--checkpoint", &ckpt, contract.to_str().unwrap(), "--bytecode", bytecode],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    let probs = v["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 3);
    let sum: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert!(v["label"].is_string() && v["config_hash"].is_string());

    let eval = scvd(ws.path(), &["--json", "eval", "--checkpoint", &ckpt]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(stdout_json(&eval)["test_size"], 6);

    let missing = scvd(ws.path(), &["predict", "--checkpoint", "/no/such/ckpt", contract.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/no/such/ckpt"));
}

#[test]
fn ablation_single_cell_writes_one_report() {
    let ws = tempfile::tempdir().unwrap();
    assert!(scvd(ws.path(), &["features"]).status.success());
    let out = scvd(ws.path(), &["--json", "--seed", "0", "ablation", "--variants", "gnn", "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["reports"].as_array().unwrap().len(), 1);
    let provenance: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(v["provenance"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(provenance["class_histogram"]["arithmetic"], 10);
    assert_eq!(provenance["config_hash"], v["config_hash"]);
}
