use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn mfdelay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfdelay"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, value: serde_json::Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, value.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn small(checks: serde_json::Value) -> serde_json::Value {
    json!({
        "name": "small", "model": "lq_meanfield", "params": {"su": 0.5},
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": 300, "seed": 5, "initial": [0.5],
        "kernels": {"state": ["uniform", "uniform", "uniform", "uniform"]},
        "checks": checks
    })
}

#[test]
fn simulate_writes_reports_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), small(json!(["simulate"])));
    let out = dir.path().join("out");
    let o = mfdelay(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--dump-trajectories",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS small/simulate"));
    for f in [
        "summary.json",
        "timing.json",
        "small/simulate.json",
        "small/mean_path.csv",
        "small/trajectories.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small(json!(["adjoint"]));
    v["picard"] = json!({"max_iter": 1});
    let cfg = write_config(dir.path(), v);
    let out = dir.path().join("out");
    let o = mfdelay(&["all", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL small/picard"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], json!(false));
}

#[test]
fn bad_config_exits_two_with_error_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small(json!([]));
    v["grid"]["horizon"] = json!(0.3);
    let cfg = write_config(dir.path(), v);
    let out = dir.path().join("out");
    let o = mfdelay(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let line = String::from_utf8_lossy(&o.stderr).lines().last().unwrap().to_string();
    let err: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(err["error"]["kind"], json!("config"));
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(saved, err["error"]);

    let missing = dir.path().join("missing.json");
    let o = mfdelay(&[
        "simulate",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_pipeline_is_a_usage_error() {
    let o = mfdelay(&["frobnicate", "--config", "x.json"]);
    assert!(!o.status.success());
}

#[test]
fn thread_count_and_reruns_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), small(json!(["simulate", "adjoint"])));
    let mut outs = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "2"), ("c", "1")] {
        let out = dir.path().join(tag);
        let o = mfdelay(&[
            "all",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_eq!(o.status.code(), Some(0));
        outs.push(out);
    }
    for f in [
        "summary.json",
        "small/simulate.json",
        "small/adjoint.json",
        "small/mean_path.csv",
        "small/picard.csv",
    ] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        for o in &outs[1..] {
            assert_eq!(a, std::fs::read(o.join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn seed_override_changes_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), small(json!(["simulate"])));
    let read = |tag: &str, seed: Option<&str>| {
        let out = dir.path().join(tag);
        let mut args = vec!["simulate", "--config", &cfg, "--out", out.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert_eq!(mfdelay(&args).status.code(), Some(0));
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("small/simulate.json")).unwrap()).unwrap();
        v[0]["config_digest"].as_str().unwrap().to_string()
    };
    assert_ne!(read("a", None), read("b", Some("99")));
}
