use std::path::Path;
use std::process::{Command, Output};

fn drope(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drope"))
        .args(args)
        .env("DROPE_OUT", out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(out: &Path, experiment: &str, scheme: &str) -> std::path::PathBuf {
    ok(&drope(out, &["train", "--preset", "tiny", "--steps", "12", "--scheme", scheme, "--experiment", experiment]));
    out.join(experiment).join("checkpoints/final.ckpt")
}

#[test]
fn train_writes_layout_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "a", "rope");
    let root = dir.path().join("a");
    assert!(ck.exists());
    assert!(root.join("config.snapshot").exists());
    assert!(!root.join(".lock").exists());
    let first = std::fs::read_to_string(root.join("metrics/train.csv")).unwrap();
    assert_eq!(first.lines().count(), 13);

    train_tiny(dir.path(), "a", "rope");
    assert_eq!(std::fs::read_to_string(root.join("metrics/train.csv")).unwrap(), first);

    let snapshot = root.join("config.snapshot");
    let copy = dir.path().join("snap.toml");
    std::fs::copy(&snapshot, &copy).unwrap();
    ok(&drope(dir.path(), &["train", "--config", copy.to_str().unwrap(), "--experiment", "b"]));
    assert_eq!(std::fs::read_to_string(dir.path().join("b/metrics/train.csv")).unwrap(), first);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(drope(dir.path(), &["train", "--preset", "huge"]).status.code(), Some(2));
    assert_eq!(drope(dir.path(), &["frobnicate"]).status.code(), Some(2));

    let nope = train_tiny(dir.path(), "n", "nope");
    let o = drope(dir.path(), &["eval", "--preset", "tiny", "--checkpoint", nope.to_str().unwrap(), "--scaling", "yarn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rotary"));

    let o = drope(dir.path(), &["drope", "--preset", "tiny", "--parent", nope.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "r", "rope");
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = drope(dir.path(), &["inspect", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));

    std::fs::write(dir.path().join("r/.lock"), "1").unwrap();
    let o = drope(dir.path(), &["train", "--preset", "tiny", "--steps", "2", "--experiment", "r"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn drope_without_steps_only_strips() {
    let dir = tempfile::tempdir().unwrap();
    let parent = train_tiny(dir.path(), "p", "rope");
    ok(&drope(dir.path(), &["drope", "--preset", "tiny", "--parent", parent.to_str().unwrap(), "--drope-steps", "0", "--experiment", "d"]));
    let child = dir.path().join("d/checkpoints/drope.ckpt");
    let out = ok(&drope(dir.path(), &["inspect", child.to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["config"]["scheme"]["kind"], "nope");
    assert_eq!(v["config"]["qk_norm"], "on");
    let prov: Vec<String> = serde_json::from_value(v["provenance"].clone()).unwrap();
    assert_eq!(prov.last().unwrap(), "drope-strip@step=12");
    assert_eq!(v["step"], 12);

    let out = ok(&drope(dir.path(), &["eval", "--preset", "tiny", "--checkpoint", child.to_str().unwrap(), "--lengths", "1x,2x", "--crop", "--experiment", "d"]));
    assert!(out.contains("crop"));
    let csv = std::fs::read_to_string(dir.path().join("d/results/eval.csv")).unwrap();
    assert!(csv.starts_with("method,scheme,scaling,s,length,task,trials,success_rate,partial_credit,ppl\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("drope,nope,none,1.0,4,ppl,"));
}

#[test]
fn frequency_census_is_model_free() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&drope(dir.path(), &["analyze", "--frequencies", "--base", "10000", "--dk", "64", "--ctrain", "32000", "--experiment", "f"]));
    assert!(out.contains("2 of 32 frequencies"), "{out}");
    let phases = std::fs::read_to_string(dir.path().join("f/analysis/phases.csv")).unwrap();
    assert_eq!(phases.lines().count(), 33);
    assert!(phases.starts_with("m,omega,phi_train,phi_test,subcycle\n"));
    assert!(dir.path().join("f/analysis/gammas.csv").exists());
}

#[test]
fn analysis_reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let nope = train_tiny(dir.path(), "z", "nope");
    let ck = nope.to_str().unwrap();
    ok(&drope(dir.path(), &["analyze", "--preset", "tiny", "--checkpoint", ck, "--bias", "--bounds", "--profiles", "--samples", "2", "--experiment", "z"]));
    let bias = std::fs::read_to_string(dir.path().join("z/analysis/bias.csv")).unwrap();
    assert!(bias.starts_with("layer,head,weights_kind,bias,grad_norm_q,grad_norm_k\n"));
    assert_eq!(bias.lines().count(), 1 + 2 * 2);
    assert!(dir.path().join("z/analysis/bounds.csv").exists());
    assert!(dir.path().join("z/analysis/attention_profile.csv").exists());

    ok(&drope(dir.path(), &["analyze", "--preset", "tiny", "--scheme", "rope", "--bias", "--samples", "1", "--experiment", "fresh"]));
}
