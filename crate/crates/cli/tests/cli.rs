use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rollout-lab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

const ZERO_CONFIG: &str = r#"{"schema":"rollout-config/1","n":5,"mask":{"kind":"causal"},"depth":4,
 "layer_template":{"bias":{"kind":"alibi","slopes":[1.0]},"content":{"u":0.5,"delta":1.0}},
 "schedule":{"constant":0.0},"variant":"c"}"#;

#[test]
fn zero_schedule_run_stays_on_last_position() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), ZERO_CONFIG).unwrap();
    let out = lab(&["run", "--config", "cfg.json", "--variant", "b", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("depth,position,mass"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let want = if f[1] == "5" { "1" } else { "0" };
        assert_eq!(f[2], want, "{line}");
    }
    let summary = stdout_json(&out);
    assert_eq!(summary["variant"], "b");
    assert_eq!(summary["p_last"], 1.0);

    let v = lab(&["validate", "out/trajectory.json", "out/trajectory.csv", "cfg.json"], dir.path());
    assert!(v.status.success());
}

#[test]
fn self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("p.json"),
        r#"{"schema":"distribution/1","n":4,"probs":[0.1,0.2,0.3,0.4]}"#,
    )
    .unwrap();
    let out = lab(&["compare", "--pred", "p.json", "--meas", "p.json", "--out", "c.json"], dir.path());
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert_eq!(r["spearman"], 1.0);
    assert_eq!(r["wasserstein"], 0.0);
    assert!(lab(&["validate", "c.json"], dir.path()).status.success());

    fs::write(
        dir.path().join("flat.json"),
        r#"{"schema":"distribution/1","n":4,"probs":[0.25,0.25,0.25,0.25]}"#,
    )
    .unwrap();
    let out = lab(&["compare", "--pred", "flat.json", "--meas", "flat.json"], dir.path());
    assert_eq!(out.status.code(), Some(6));
    assert_eq!(stderr_json(&out)["error"], "undefined");
}

#[test]
fn dichotomy_collapses_under_full_mixing() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        &["dichotomy", "--schedule", "constant:1.0", "--kernel", "uniform", "--n", "8", "--depth", "200", "--out", "d"],
        dir.path(),
    );
    assert!(out.status.success());
    let s = stdout_json(&out);
    assert_eq!(s["collapse"], true);
    assert!(s["p_n1"].as_f64().unwrap() >= 0.999);
    let v = lab(&["validate", "d/dichotomy.json", "d/bounds.csv"], dir.path());
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stdout));
    let header = fs::read_to_string(dir.path().join("d/bounds.csv")).unwrap();
    assert!(header.starts_with("T,sum_lambda,bound,observed_diag_min,P_n1\n"));
}

#[test]
fn seeded_commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        let out = lab(
            &["--threads", "2", "check-monotone", "--kernel", "noise:2", "--n", "12", "--seed", seed],
            dir.path(),
        );
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run("11"), run("11"));
    assert_ne!(run("11"), run("12"));

    let env_run = Command::new(env!("CARGO_BIN_EXE_rollout-lab"))
        .args(["check-monotone", "--kernel", "random", "--n", "10", "--seed", "3"])
        .env("ROLLOUT_LAB_THREADS", "1")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    assert_eq!(stdout_json(&env_run)["violations"], 0);
}

#[test]
fn check_monotone_counterexample_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("k.json"),
        r#"{"schema":"kernel/1","n":3,"mask":{"kind":"causal"},"rows":[[1,0,0],[0.2,0.8,0],[0.5,0.3,0.2]]}"#,
    )
    .unwrap();
    let out = lab(&["check-monotone", "k.json", "--out", "r.json"], dir.path());
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert_eq!(r["violations"], 1);
    assert!((r["max_gap"].as_f64().unwrap() - 0.3).abs() < 1e-12);
    assert!(lab(&["validate", "r.json"], dir.path()).status.success());
}

#[test]
fn fit_content_from_logit_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("l.json"),
        r#"{"schema":"logit-matrix/1","n":3,"mask":{"kind":"causal"},"layer":1,"head":0,
            "logits":[[5,null,null],[2,5,null],[2,2,5]]}"#,
    )
    .unwrap();
    let out = lab(&["fit-content", "l.json", "--bins", "16", "--out", "fit.json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let f = stdout_json(&out);
    assert_eq!(f["u_hat"], 2.0);
    assert_eq!(f["delta_hat"], 3.0);
    assert_eq!(f["bins"], 16);
    assert!(lab(&["validate", "fit.json"], dir.path()).status.success());
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let usage = lab(&["frobnicate"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(stderr_json(&usage)["error"], "usage");

    let io = lab(&["run", "--config", "missing.json"], dir.path());
    assert_eq!(io.status.code(), Some(3));
    assert!(stderr_json(&io)["message"].as_str().unwrap().contains("missing.json"));

    fs::write(dir.path().join("bad.json"), r#"{"schema":"schedule/7"}"#).unwrap();
    let schema = lab(&["validate", "bad.json"], dir.path());
    assert_eq!(schema.status.code(), Some(4));

    let range = lab(&["dichotomy", "--schedule", "constant:1.5", "--depth", "4"], dir.path());
    assert_eq!(range.status.code(), Some(5));
    assert_eq!(stderr_json(&range)["error"], "out_of_range");

    let help = lab(&["--help"], dir.path());
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("Exit codes"));
}
