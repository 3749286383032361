use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path, env_seed: Option<&str>) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_delayfolio"));
    cmd.args(args).arg("--out").arg(out).env_remove("DELAYFOLIO_SEED");
    if let Some(s) = env_seed {
        cmd.env("DELAYFOLIO_SEED", s);
    }
    cmd.output().unwrap().status.code().unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn merton_text() -> String {
    fs::read_to_string(configs().join("merton.toml")).unwrap()
}

#[test]
fn empty_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(run(&["simulate", "--config", &cfg], &out, None), 2);
    let m = manifest(&out);
    assert_eq!(m["status"], "error");
    assert_eq!(m["exit_code"], 2);
    assert_eq!(m["error"]["kind"], "config");
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &merton_text().replace("[numerics]", "[numerics]\nwobble = 3"));
    let out = tmp.path().join("out");
    assert_eq!(run(&["simulate", "--config", &cfg], &out, None), 2);
    assert!(manifest(&out)["error"]["message"].as_str().unwrap().contains("wobble"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["lsmc", "--config", "/nonexistent/x.toml"], &out, None), 2);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn simulate_requires_a_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["simulate"], &out, None), 2);
}

#[test]
fn nonnegative_beta1_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("lq_infinite.toml"))
        .unwrap()
        .replace("beta1 = -2.0", "beta1 = 0.5")
        .replace("feynman_kac = true", "feynman_kac = false");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    assert_eq!(run(&["riccati", "--config", &cfg], &out, None), 2);
    assert_eq!(manifest(&out)["error"]["kind"], "config");
}

#[test]
fn figure1_needs_no_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["figure1"], &out, None), 0);
    let csv = fs::read_to_string(out.join("figure1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,psi1,psi2,psi3,psi4");
    let last = csv.lines().last().unwrap();
    assert!(last.split(',').skip(1).all(|c| c.parse::<f64>().unwrap() == 0.0));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "figure1.csv"));
}

#[test]
fn verify_passes_on_merton() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("merton.toml");
    let out = tmp.path().join("out");
    assert_eq!(run(&["verify", "--config", cfg.to_str().unwrap(), "--paths", "5000"], &out, None), 0);
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    let tests = v.as_array().unwrap();
    assert!(tests.len() > 10);
    assert!(tests.iter().all(|t| t["passed"] == true));
}

#[test]
fn verify_failure_exits_one_and_keeps_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("pointwise.toml");
    let out = tmp.path().join("out");
    assert_eq!(run(&["verify", "--config", cfg.to_str().unwrap(), "--paths", "5000"], &out, None), 1);
    assert!(out.join("verify.json").exists());
    let m = manifest(&out);
    assert_eq!(m["error"]["kind"], "verify");
    assert_eq!(m["exit_code"], 1);
}

#[test]
fn seed_precedence_flag_config_env() {
    let tmp = tempfile::tempdir().unwrap();
    let no_seed = merton_text().replace("seed = 42\n", "");
    let cfg = write_config(tmp.path(), &no_seed);
    let args = ["simulate", "--config", cfg.as_str(), "--paths", "50", "--steps", "5"];

    let out = tmp.path().join("env");
    assert_eq!(run(&args, &out, Some("77")), 0);
    assert_eq!(manifest(&out)["seed"], 77);
    assert_eq!(manifest(&out)["seed_source"], "env");

    let out = tmp.path().join("default");
    assert_eq!(run(&args, &out, None), 0);
    assert_eq!(manifest(&out)["seed"], 42);
    assert_eq!(manifest(&out)["seed_source"], "default");

    let out = tmp.path().join("flag");
    let mut with_flag = args.to_vec();
    with_flag.extend(["--seed", "9"]);
    assert_eq!(run(&with_flag, &out, Some("77")), 0);
    assert_eq!(manifest(&out)["seed"], 9);
    assert_eq!(manifest(&out)["seed_source"], "flag");

    let out = tmp.path().join("bad_env");
    assert_eq!(run(&args, &out, Some("abc")), 2);
}

#[test]
fn zero_workers_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["figure1", "--workers", "0"], &out, None), 2);
}
