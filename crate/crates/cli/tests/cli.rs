use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn netsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netsteer"))
        .args(args)
        .env_remove("NETSTEER_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, "seed = 5\n[mfa_eval]\nsteps = 4\nrollouts = 100\n").unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn schema_is_json() {
    let o = netsteer(&["schema"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["properties"]["seed"].is_object());
}

#[test]
fn config_prints_resolved_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = netsteer(&["config", "--config", &small_config(tmp.path())]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 5"));
    assert!(text.contains("[plan]"));
}

#[test]
fn run_then_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mfa");
    let o = netsteer(&["mfa-eval", "--config", &small_config(tmp.path()), "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let listed = String::from_utf8(o.stdout).unwrap();
    assert!(listed.lines().any(|l| l.ends_with("manifest.json")));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["command"], "mfa-eval");

    let o = netsteer(&["replay", "--manifest", out.join("manifest.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("identical:"));
    assert!(out.join("replay").join("mfa.csv").exists());
}

#[test]
fn env_var_sets_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_netsteer"))
        .args(["mfa-eval", "--config", &small_config(tmp.path())])
        .env("NETSTEER_OUT", &out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nno_such_key = 2\n").unwrap();
    let o = netsteer(&["simulate", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let line = String::from_utf8(o.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(v["kind"], "invalid_config");
    assert_eq!(v["module"], "harness");

    let o = netsteer(&["fit", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert!(!o.status.success());
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(o.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["kind"], "io_error");
}
