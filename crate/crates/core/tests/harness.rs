mod common;

use mfdelay::harness::{parse_configs, run_all, run_pipeline, selected, Pipeline, RunOptions};
use mfdelay::stats::fit_loglog_slope;
use mfdelay::variation::QUANTITY_NAMES;
use mfdelay::Error;
use serde_json::json;

fn base() -> serde_json::Value {
    json!({
        "name": "base", "model": "lq_delay",
        "grid": {"n": 1, "w": 1, "m": 8, "delay": 0.25, "horizon": 0.5},
        "particles": 200, "seed": 1
    })
}

fn config_error(v: serde_json::Value) -> bool {
    matches!(parse_configs(&v.to_string()), Err(Error::Config(_)))
}

#[test]
fn single_and_multiple_experiments_parse() {
    assert_eq!(parse_configs(&base().to_string()).unwrap().len(), 1);
    let mut other = base();
    other["name"] = json!("other");
    let many = json!({"experiments": [base(), other]});
    let cfgs = parse_configs(&many.to_string()).unwrap();
    assert_eq!(cfgs.len(), 2);
    assert_eq!(cfgs[0].particles, 200);
    assert_eq!(cfgs[1].name, "other");
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(config_error(json!({"experiments": [base(), base()]})));
    assert!(config_error(json!({"experiments": []})));
    let mut v = base();
    v["unknown"] = json!(1);
    assert!(config_error(v));
    let mut v = base();
    v["model"] = json!("no_such_model");
    assert!(config_error(v));
    let mut v = base();
    v["params"] = json!({"not_a_param": 1.0});
    assert!(config_error(v));
    let mut v = base();
    v["grid"]["horizon"] = json!(0.51);
    assert!(config_error(v));
    let mut v = base();
    v["name"] = json!("has space");
    assert!(config_error(v));
    let mut v = base();
    v["checks"] = json!(["orders"]);
    assert!(config_error(v));
    let mut v = base();
    v["spike"] = json!({"v": [0.5], "tau": 0.125, "eps": [0.03125]});
    assert!(config_error(v));
    let mut v = base();
    v["spike"] = json!({"v": [1.0], "tau": 0.125, "eps": [1.0]});
    assert!(config_error(v));
    let mut v = base();
    v["checks"] = json!(["smp-check"]);
    v["smp_pieces"] = json!(3);
    assert!(config_error(v));
    let mut v = base();
    v["checks"] = json!(["tensor"]);
    v["spike"] = json!({"v": [1.0], "tau": 0.125, "eps": [0.125]});
    v["tensor"] = json!({"levels": [8, 16, 64], "tau": 0.125, "eps": 0.125});
    assert!(config_error(v));
    let mut v = base();
    v["dual_family_steps"] = json!([40]);
    assert!(config_error(v));
    assert!(matches!(parse_configs("{not json"), Err(Error::Json(_))));
}

#[test]
fn digest_is_stable_and_sensitive() {
    let a = common::config(base());
    let b = common::config(base());
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.digest().len(), 64);
    let mut v = base();
    v["seed"] = json!(2);
    assert_ne!(a.digest(), common::config(v).digest());
}

#[test]
fn slope_fit_recovers_power_laws() {
    let eps = [0.01, 0.02, 0.04, 0.08];
    for (p, c) in [(1.0, 3.0), (2.0, 0.5)] {
        let v: Vec<f64> = eps.iter().map(|e: &f64| c * e.powf(p)).collect();
        let f = fit_loglog_slope(&eps, &v).unwrap();
        assert!((f.slope - p).abs() < 1e-12);
        assert!((f.intercept - c.ln()).abs() < 1e-10);
        assert!(f.ci95.0 <= f.slope && f.slope <= f.ci95.1);
    }
    let v: Vec<f64> = eps.iter().map(|e| e * (1.0 + 0.05 * (37.0 * e).sin())).collect();
    let f = fit_loglog_slope(&eps, &v).unwrap();
    assert!((0.9..=1.1).contains(&f.slope), "{}", f.slope);
}

#[test]
fn slope_fit_needs_three_positive_points() {
    assert!(matches!(fit_loglog_slope(&[0.1, 0.2], &[1.0, 2.0]), Err(Error::Fit(_))));
    assert!(matches!(
        fit_loglog_slope(&[0.1, 0.2, 0.4], &[1.0, 0.0, 2.0]),
        Err(Error::Fit(_))
    ));
    assert!(
        fit_loglog_slope(&[0.1, 0.2, 0.4, 0.8], &[1.0, 0.0, 2.0, 3.0])
            .unwrap()
            .excluded
            == 1
    );
    assert!(fit_loglog_slope(&[0.1, 0.1, 0.1], &[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn simulate_writes_one_row_per_step() {
    let cfg = common::config(base());
    let out = run_pipeline(
        &cfg,
        Pipeline::Simulate,
        &RunOptions {
            dump_trajectories: true,
        },
    )
    .unwrap();
    let mean = out.tables.iter().find(|t| t.file == "mean_path.csv").unwrap();
    assert_eq!(mean.rows.len(), 16 + 1);
    assert_eq!(mean.header, ["step", "t", "mean_head_0"]);
    let traj = out.tables.iter().find(|t| t.file == "trajectories.csv").unwrap();
    assert_eq!(traj.rows.len(), 200 * 17);
    assert_eq!(traj.header, ["particle", "step", "t", "head_0"]);
    assert_eq!(out.records.len(), 1);
    assert!(out.records[0].pass);
}

#[test]
fn orders_report_every_quantity() {
    let mut v = base();
    v["model"] = json!("smooth_nonlinear");
    v["grid"]["m"] = json!(16);
    v["spike"] = json!({"v": [1.0], "tau": 0.125, "eps": [0.0625, 0.125, 0.25]});
    v["checks"] = json!(["orders"]);
    let cfg = common::config(v);
    let out = run_pipeline(&cfg, Pipeline::Orders, &RunOptions::default()).unwrap();
    let names: Vec<_> = out.records.iter().map(|r| r.check.clone()).collect();
    let expected: Vec<_> = QUANTITY_NAMES.iter().map(|q| format!("order/{q}")).collect();
    assert_eq!(names, expected);
    assert_eq!(out.tables[0].rows.len(), 6 * 3);
}

#[test]
fn all_expands_to_listed_checks() {
    let mut v = base();
    v["checks"] = json!(["adjoint", "simulate"]);
    let cfg = common::config(v);
    assert_eq!(
        selected(&cfg, Pipeline::All),
        vec![Pipeline::Simulate, Pipeline::Adjoint]
    );
    assert_eq!(selected(&cfg, Pipeline::Simulate), vec![Pipeline::Simulate]);
    assert!(selected(&cfg, Pipeline::Duality).is_empty());
    assert!(run_pipeline(&cfg, Pipeline::All, &RunOptions::default()).is_err());
}

#[test]
fn run_all_writes_reports_and_separate_timings() {
    let mut v = base();
    v["checks"] = json!(["simulate", "adjoint"]);
    let cfg = common::config(v);
    let dir = tempfile::tempdir().unwrap();
    let summary = run_all(
        std::slice::from_ref(&cfg),
        Pipeline::All,
        dir.path(),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(summary.pass());
    assert_eq!(summary.timings.len(), 2);
    for f in [
        "summary.json",
        "timing.json",
        "base/simulate.json",
        "base/adjoint.json",
        "base/mean_path.csv",
        "base/picard.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("base/mean_path.csv")).unwrap();
    assert!(csv.starts_with("config_digest,step,t,mean_head_0"));
    assert!(csv.lines().nth(1).unwrap().starts_with(&cfg.digest()));
    let summary_json = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(!summary_json.contains("seconds"));
}

#[test]
fn run_all_without_matching_pipeline_is_an_error() {
    let cfg = common::config(base());
    let dir = tempfile::tempdir().unwrap();
    let err = run_all(&[cfg], Pipeline::Tensor, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err.0, Error::Config(_)));
}
