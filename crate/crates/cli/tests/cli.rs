use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn schema(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn headlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headlab")).args(args).env_remove("HEADLAB_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = headlab(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn digest(p: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(p).unwrap()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_valid(schema: &Value, doc: &Value) {
    let v = jsonschema::validator_for(schema).unwrap();
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn dissociate_from_performance_csv() {
    let d = tempfile::tempdir().unwrap();
    let input = data("perf_five_tasks.csv");
    let before = fs::read(&input).unwrap();
    let out = ok(&["dissociate", "--from", s(&input), "--out", s(d.path())]);
    assert_eq!(fs::read(&input).unwrap(), before, "input mutated");

    let line = out.lines().find(|l| l.starts_with("D_i(0.30):")).unwrap();
    let got: Vec<f64> = line.split_whitespace().skip(1).map(|kv| kv.split_once('=').unwrap().1.parse().unwrap()).collect();
    // The same scores computed by hand from the fixture, in column order.
    let want = [7.237, 5.260, 9.833, 11.079, 3.284];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 0.006, "{line}");
    }
    assert!(out.contains("label: double (mild)"), "{out}");

    let report: Value = serde_json::from_str(&fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert_valid(&schema("report.schema.json"), &report);
    assert!(report.get("similarity").is_none());

    // The CSV written back is itself a valid input with the same scores.
    let again = tempfile::tempdir().unwrap();
    let out2 = ok(&["dissociate", "--from", s(&d.path().join("dissociation.csv")), "--out", s(again.path())]);
    assert_eq!(out2.lines().next(), out.lines().next());
}

#[test]
fn training_is_deterministic_and_reports_validate() {
    let cfg = data("tiny.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let before = fs::read(&cfg).unwrap();
    ok(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(a.path())]);
    ok(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(b.path()), "--sequential"]);
    assert_eq!(fs::read(&cfg).unwrap(), before);
    let pa = a.path().join("checkpoint/params.bin");
    assert_eq!(digest(&pa), digest(&b.path().join("checkpoint/params.bin")));
    assert_eq!(fs::read(a.path().join("report.json")).unwrap(), fs::read(b.path().join("report.json")).unwrap());

    let report: Value = serde_json::from_str(&fs::read_to_string(a.path().join("report.json")).unwrap()).unwrap();
    assert_valid(&schema("report.schema.json"), &report);
    assert_valid(&schema("config.schema.json"), &report["config"]);
    assert_eq!(report["config"]["schedule"]["seed"], 7);

    // Re-running from the config echo reproduces the checkpoint.
    let echo = a.path().join("echo.json");
    fs::write(&echo, report["config"].to_string()).unwrap();
    let c = tempfile::tempdir().unwrap();
    ok(&["train", "--config", s(&echo), "--out", s(c.path())]);
    assert_eq!(digest(&pa), digest(&c.path().join("checkpoint/params.bin")));

    let other = tempfile::tempdir().unwrap();
    ok(&["train", "--config", s(&cfg), "--seed", "8", "--out", s(other.path())]);
    assert_ne!(digest(&pa), digest(&other.path().join("checkpoint/params.bin")));
}

#[test]
fn resume_mid_iat_matches_continuous_run() {
    let cfg = data("tiny.json");
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    ok(&["iat", "--config", s(&cfg), "--out", s(full.path())]);
    // 2 epochs of 16 batches each; IAT starts at step 16.
    ok(&["iat", "--config", s(&cfg), "--out", s(part.path()), "--stop-at", "21"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(part.path().join("checkpoint/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["phase"], "iat");
    ok(&["iat", "--resume", s(&part.path().join("checkpoint")), "--out", s(part.path())]);
    for f in ["params.bin", "optim.bin"] {
        assert_eq!(digest(&full.path().join("checkpoint").join(f)), digest(&part.path().join("checkpoint").join(f)), "{f}");
    }
    let log = |p: &Path| fs::read_to_string(p.join("train.log.jsonl")).unwrap();
    assert_eq!(log(full.path()), log(part.path()));
    assert!(log(full.path()).contains(r#"{"event":"phase","phase":"iat","step":16}"#));
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::from_str(&fs::read_to_string(data("tiny.json")).unwrap()).unwrap();
    v["schedule"]["delta"] = 1.5.into();
    let bad = d.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    let o = headlab(&["train", "--config", s(&bad), "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule.delta"));

    let o = headlab(&["iat", "--config", s(&data("tiny.json")), "--delta", "0", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(2));

    fs::write(&bad, r#"{"version": 1, "model": {}, "tasks": []}"#).unwrap();
    assert_eq!(headlab(&["train", "--config", s(&bad)]).status.code(), Some(2));
    assert!(!d.path().join("checkpoint").exists());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(&["train", "--config", s(&data("tiny.json")), "--out", s(d.path()), "--stop-at", "2"]);
    let p = d.path().join("checkpoint/params.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    let o = headlab(&["importance", "--checkpoint", s(&d.path().join("checkpoint")), "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&format!("expected {} bytes, found {}", bytes.len(), bytes.len() - 4)), "{err}");
}

#[test]
fn output_directory_precedence() {
    let d = tempfile::tempdir().unwrap();
    let csv = data("perf_five_tasks.csv");
    let env_dir = d.path().join("env");
    let flag_dir = d.path().join("flag");
    let run = |extra: &[&str], env: Option<&Path>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_headlab"));
        c.current_dir(d.path()).args(["dissociate", "--from", s(&csv)]).args(extra);
        match env {
            Some(e) => c.env("HEADLAB_OUT", e),
            None => c.env_remove("HEADLAB_OUT"),
        };
        assert!(c.status().unwrap().success());
    };
    run(&["--out", s(&flag_dir)], Some(&env_dir));
    assert!(flag_dir.join("report.json").exists());
    assert!(!env_dir.exists());
    run(&[], Some(&env_dir));
    assert!(env_dir.join("report.json").exists());
    run(&[], None);
    assert!(d.path().join("headlab-out/report.json").exists());
}

#[test]
fn analysis_commands_chain() {
    let cfg = data("tiny.json");
    let d = tempfile::tempdir().unwrap();
    let run = d.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--delta", "0"]);
    let ck = run.join("checkpoint");

    let imp = d.path().join("imp");
    ok(&["importance", "--checkpoint", s(&ck), "--out", s(&imp)]);
    let csv = fs::read_to_string(imp.join("importance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 8);

    let pe = d.path().join("prune");
    let table = ok(&["prune-eval", "--checkpoint", s(&ck), "--out", s(&pe)]);
    assert!(table.starts_with("pruned_for_task,parity,equal\n"));
    assert!(table.contains("\nbase,"));
    let report: Value = serde_json::from_str(&fs::read_to_string(pe.join("report.json")).unwrap()).unwrap();
    assert_valid(&schema("report.schema.json"), &report);
    assert_eq!(report["head_sets"].as_array().unwrap().len(), 2);

    let probes = d.path().join("probes.txt");
    fs::write(&probes, "f1 f2 m0\nf3 f4 f5 f6\nf2\tf2\nf7 m1\tf8\n").unwrap();
    let sim = d.path().join("sim");
    ok(&[
        "similarity",
        "--model",
        &format!("parity={}", s(&ck)),
        "--model",
        &format!("equal={}", s(&ck)),
        "--probes",
        s(&probes),
        "--metric",
        "dse,cra",
        "--out",
        s(&sim),
    ]);
    let dse = fs::read_to_string(sim.join("similarity_dse.csv")).unwrap();
    assert!(dse.starts_with("metric,source,target,value\n"));
    let report: Value = serde_json::from_str(&fs::read_to_string(sim.join("report.json")).unwrap()).unwrap();
    assert_valid(&schema("report.schema.json"), &report);

    let merged = d.path().join("merged");
    ok(&["report", s(&pe.join("report.json")), s(&sim.join("report.json")), "--out", s(&merged)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(merged.join("report.json")).unwrap()).unwrap();
    assert_valid(&schema("report.schema.json"), &report);
    assert_eq!(report["similarity"].as_array().unwrap().len(), 2);
    assert!(merged.join("dissociation.csv").exists());
}

#[test]
fn correlate_reports_scatter() {
    let d = tempfile::tempdir().unwrap();
    let sim = d.path().join("sim.csv");
    fs::write(
        &sim,
        "metric,source,target,value\nDSE,a,b,0.1\nDSE,a,c,0.4\nDSE,b,c,0.9\nDSE,b,a,0.1\nDSE,c,a,0.4\nDSE,c,b,0.9\n",
    )
    .unwrap();
    let scores = d.path().join("scores.csv");
    fs::write(&scores, "task_a,task_b,score\na,b,12\na,c,8\nb,c,2\n").unwrap();
    let out = ok(&["correlate", "--similarity", s(&sim), "--scores", s(&scores), "--out", s(d.path())]);
    assert!(out.contains("n = 3"), "{out}");
    assert!(out.contains("spearman = -1.0000"), "{out}");
    let rows = fs::read_to_string(d.path().join("correlation.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn selfcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["selfcheck", "--out", s(d.path())]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.contains("PASS gate-gradient-fd: 20 seeds"));
}
