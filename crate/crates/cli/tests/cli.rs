use std::path::Path;
use std::process::{Command, Output};

fn oapr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oapr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = oapr(args, cwd);
    assert!(
        out.status.success(),
        "oapr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn seed_is_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["split", "--catalog", "c.json", "-o", "m.json"],
        vec!["train", "--catalog", "c", "--manifest", "m", "--gallery", "g", "-o", "ck"],
        vec!["eval", "--checkpoint", "ck", "--index", "i", "--mode", "balanced"],
    ] {
        let out = oapr(&args, d);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"), "{args:?}");
    }
}

#[test]
fn pipeline_from_synthetic_data_to_latency() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "-o", "data", "--train", "24", "--test", "12", "--seed", "3"], d);
    ok(&["split", "--catalog", "data/catalog.json", "--seed", "0", "-o", "manifest.json"], d);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["novel"].as_array().unwrap().len(), 3);

    let train = ok(
        &[
            "train", "--catalog", "data/catalog.json", "--manifest", "manifest.json", "--gallery", "data/train.jsonl",
            "--seed", "0", "--epochs", "1", "--batch-size", "8", "--log", "train.log", "-o", "ck.json",
        ],
        d,
    );
    assert!(train.contains("checkpoint sha256:"), "{train}");
    assert_eq!(std::fs::read_to_string(d.join("train.log")).unwrap().lines().count(), 3 + 1);

    ok(&["index", "--checkpoint", "ck.json", "--gallery", "data/test.jsonl", "-o", "test.idx"], d);
    let eval = ok(
        &["eval", "--checkpoint", "ck.json", "--index", "test.idx", "--seed", "0", "--k", "1,5", "-o", "report.json"],
        d,
    );
    assert!(eval.contains("novel") && eval.contains("base"), "{eval}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["eval_mode"]["mode"], "balanced");
    let full = ok(&["eval", "--checkpoint", "ck.json", "--index", "test.idx", "--mode", "full"], d);
    assert!(full.contains("P-lbl"));

    let bench = ok(&["bench-latency", "--index", "test.idx", "--checkpoint", "ck.json", "--batch", "8"], d);
    let r: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(r["queries"], 8);
    assert_eq!(r["gallery_size"], 12);

    let dump = ok(
        &["dump-activation", "--checkpoint", "ck.json", "--image", "data/images/test_0000.png", "-o", "maps"],
        d,
    );
    assert!(dump.lines().any(|l| l.ends_with("test_0000.activations.json")));
    assert_eq!(dump.lines().filter(|l| l.ends_with(".pgm")).count(), 4);
}

#[test]
fn builtin_catalog_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["build-catalog", "--dataset", "PA-100K", "-o", "pa.json"], d);
    assert!(out.contains("26 attributes kept"), "{out}");
    let split = ok(&["split", "--catalog", "pa.json", "--seed", "0", "-o", "m.json"], d);
    assert!(split.starts_with("7 clusters"), "{split}");
    let again = ok(&["split", "--catalog", "pa.json", "--seed", "0", "-o", "m2.json"], d);
    assert_eq!(split.replace("m.json", ""), again.replace("m2.json", ""));
    assert_eq!(std::fs::read(d.join("m.json")).unwrap(), std::fs::read(d.join("m2.json")).unwrap());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = oapr(&["build-catalog", "--dataset", "nowhere", "-o", "x.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rules"));
    let out = oapr(&["split", "--catalog", "missing.json", "--seed", "1", "-o", "m.json"], dir.path());
    assert!(!out.status.success());
}
