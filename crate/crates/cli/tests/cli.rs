use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fiberalign"));
    c.env_remove("FIBERALIGN_OUT_DIR");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn help_succeeds() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    for sub in ["run", "analyze", "calibrate", "fit"] {
        assert!(stdout(&o).contains(sub));
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["run", "x.cfg", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_is_distinct_from_usage_error() {
    let o = run(&["analyze", "/nonexistent/run.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.csv"));
}

#[test]
fn bad_scenario_is_reported_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "scenario.name = smf_fine\nclimb.speed = 3\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "--out-dir",
        out.to_str().unwrap(),
        "run",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert!(!out.exists());
}

#[test]
fn seeded_run_is_reproducible_and_analyzable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("smf_fine.cfg");
    let mut csvs = Vec::new();
    for k in ["a", "b"] {
        let out = dir.path().join(k);
        let o = run(&[
            "run",
            cfg.to_str().unwrap(),
            "--seed",
            "42",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let summary = stdout(&o);
        assert_eq!(summary.lines().count(), 2);
        assert!(summary
            .lines()
            .last()
            .unwrap()
            .contains("\"scenario\":\"smf_fine\""));
        let base = out.join("smf_fine");
        assert!(base.join("summary.jsonl").is_file());
        assert!(base.join("42/analysis.jsonl").is_file());
        csvs.push(std::fs::read(base.join("42/run.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);

    let run_csv = dir.path().join("a/smf_fine/42/run.csv");
    let o = run(&["analyze", run_csv.to_str().unwrap()]);
    assert!(o.status.success());
    let first: serde_json::Value =
        serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["metric"], "time_to_threshold");
    assert_eq!(first["threshold"], 0.7);
    assert!(first["value"].as_f64().unwrap() <= 20.0);
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("FIBERALIGN_OUT_DIR", dir.path())
        .args([
            "run",
            scenario("calibration.cfg").to_str().unwrap(),
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("calibration/3/run.csv").is_file());
}

#[test]
fn calibrate_and_fit_read_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for f in ["calibration.cfg", "decay_fit.cfg"] {
        let o = run(&[
            "--out-dir",
            out,
            "run",
            scenario(f).to_str().unwrap(),
            "--seed",
            "1",
        ]);
        assert!(o.status.success());
    }
    let o = run(&[
        "calibrate",
        dir.path().join("calibration/1/run.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!((v["forward_gain_arcsec"].as_f64().unwrap() - 0.35).abs() < 0.0035);
    assert!((v["reverse_ratio"].as_f64().unwrap() - 0.95).abs() < 0.01);

    let o = run(&[
        "fit",
        dir.path().join("decay_fit/1/run.csv").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "base_efficiency,points,residual_norm"
    );
    let t_b: f64 = lines
        .next()
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((t_b - 0.8).abs() < 0.016);
}
