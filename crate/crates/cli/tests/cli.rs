use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "[synth]\ncells_per_condition = 2\nrecord_every = 100\n";

fn soh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soh")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = soh(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// The one-line JSON error of a failed run.
fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn synth_small(dir: &Path) -> String {
    let cfg = dir.join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join("data");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7"]);
    out.join("dataset.csv").to_str().unwrap().to_string()
}

/// Report JSON without the wall-clock field.
fn stable(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}

#[test]
fn synth_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7"]);
    }
    for f in ["dataset.csv", "dataset_truth.csv", "dataset_config.toml"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_writes_report_that_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let report = dir.path().join("r.json");
    let preds = dir.path().join("p.csv");
    ok(&[
        "eval",
        "--data",
        &data,
        "--features",
        "ecm",
        "--learner",
        "gpr",
        "--split",
        "default",
        "--seed",
        "7",
        "--out",
        report.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    let v = stable(&report);
    let rmse = v["rmse_pct"].as_f64().expect("rmse_pct present");
    assert!(rmse.is_finite() && rmse > 0.0);
    assert_eq!(v["config"]["seed"].as_u64(), Some(7));
    assert!(fs::read_to_string(&preds).unwrap().lines().count() > 1);

    let out = ok(&["report", report.to_str().unwrap()]);
    let line: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["rmse_pct"].as_f64(), Some(rmse));
}

#[test]
fn eval_is_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let mut reports = Vec::new();
    for jobs in ["1", "3"] {
        let path = dir.path().join(format!("r{jobs}.json"));
        ok(&[
            "eval",
            "--data",
            &data,
            "--features",
            "stats",
            "--learner",
            "gbrt",
            "--split",
            "s1",
            "--repeats",
            "4",
            "--jobs",
            jobs,
            "--out",
            path.to_str().unwrap(),
        ]);
        reports.push(stable(&path));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn sweep_writes_one_report_per_duration() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--data",
        &data,
        "--durations",
        "720,960,1200,1440,1680",
        "--learner",
        "svr",
        "--out",
        out.to_str().unwrap(),
    ]);
    let reports: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(reports.len(), 5);
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 6);
}

#[test]
fn sweep_below_six_ecm_samples_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let out =
        soh(&["sweep", "--data", &data, "--durations", "600,720", "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
    assert!(!dir.path().join("s").exists());
}

#[test]
fn report_rejects_tampered_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let report = dir.path().join("r.json");
    ok(&["eval", "--data", &data, "--features", "origi", "--learner", "gbrt", "--out", report.to_str().unwrap()]);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    v["rmse_pct"] = (v["rmse_pct"].as_f64().unwrap() + 0.01).into();
    fs::write(&report, v.to_string()).unwrap();
    let out = soh(&["report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("disagrees"));
}

#[test]
fn errors_are_single_json_lines_with_exit_codes() {
    let out = soh(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["exit_code"], 2);
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);

    let out = soh(&["eval", "--data", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "data");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[experiment]\nno_such_key = 1\n").unwrap();
    let out = soh(&["eval", "--config", bad.to_str().unwrap(), "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_ecm_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let out = ok(&["fit-ecm", "--data", &data, "--cell", "B1-01", "--cycle", "1"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["params"]["ocv_v"].as_f64().unwrap() > 4.0);
    assert_eq!(v["n_samples"], 14);

    let out = soh(&["fit-ecm", "--data", &data, "--cell", "B1-01", "--cycle", "2"]);
    assert_eq!(out.status.code(), Some(2));

    let csv = dir.path().join("f.csv");
    ok(&["extract", "--data", &data, "--features", "stats", "--duration", "720", "--out", csv.to_str().unwrap()]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("cell_id,cycle_number,family"));
    assert_eq!(text.lines().count(), 1 + 2 * (7 + 6 + 5));
}

#[test]
fn transfer_runs_all_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("tl");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--domain-shift", "0.5"]);
    let report = dir.path().join("t.json");
    ok(&[
        "transfer",
        "--source",
        data.join("source.csv").to_str().unwrap(),
        "--target",
        data.join("target.csv").to_str().unwrap(),
        "--learner",
        "gbrt",
        "--groups",
        "2",
        "--out",
        report.to_str().unwrap(),
    ]);
    let v = stable(&report);
    assert_eq!(v["methods"].as_array().unwrap().len(), 5);
    assert_eq!(v["groups"].as_array().unwrap().len(), 2);
}

#[test]
fn train_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_small(dir.path());
    let model = dir.path().join("m.json");
    ok(&["train", "--data", &data, "--features", "ecm", "--learner", "svr", "--out", model.to_str().unwrap()]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(v["format"], "soh-model");
    assert_eq!(v["family"], "ecm");
}
