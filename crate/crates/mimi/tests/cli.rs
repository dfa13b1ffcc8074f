use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimi::experiments::{
    run_estimation_study, run_imputation_study, run_rate_study, write_study, CvSettings,
    EstimationStudy, ImputationStudy, RateStudy,
};
use mimi::io::{read_csv_path, read_dictionary_path, Schema};
use mimi::report::FitReport;
use mimi_core::selection::anchors;
use mimi_core::simulate::{ColumnLayout, SimDesign};
use tempfile::TempDir;

fn mimi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimi")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated mixed data set written by the `simulate` command.
fn simulated(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("sim");
    let out = mimi(&[
        "simulate", "--m1", "30", "--m2", "6", "--groups", "3", "--layout", "mixed", "--p-obs", "0.7",
        "--seed", "9", "--out", s(&dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn input_args(dir: &Path) -> Vec<String> {
    vec![
        "--data".into(),
        dir.join("data.csv").to_string_lossy().into_owned(),
        "--schema".into(),
        dir.join("schema.json").to_string_lossy().into_owned(),
        "--dict".into(),
        dir.join("dict.json").to_string_lossy().into_owned(),
    ]
}

fn run_with(cmd: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(input_args(dir));
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    mimi(&refs)
}

#[test]
fn simulate_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    for name in ["data.csv", "schema.json", "dict.json", "design.json", "alpha_true.csv", "l_true.csv", "complete.csv"] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    let design: SimDesign = serde_json::from_slice(&fs::read(dir.join("design.json")).unwrap()).unwrap();
    assert_eq!((design.m1, design.m2, design.seed), (30, 6, 9));
}

#[test]
fn fit_writes_report_and_estimates() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    let out_dir = tmp.path().join("fit");
    let out = run_with("fit", &dir, &["--lambda1", "2", "--lambda2", "0.5", "--out", s(&out_dir)]);
    let report: FitReport = serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(code(&out), if report.converged { 0 } else { 2 });
    assert_eq!(report.config.lambda1, 2.0);
    assert_eq!(report.objective_trace.len(), report.n_iter + 1);
    assert!(report.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    assert!(report.rank <= 6);
    assert!(report.wall_time_secs >= 0.0);
    let l = fs::read_to_string(out_dir.join("l.csv")).unwrap();
    assert_eq!(l.lines().count(), 31);
    let alpha = fs::read_to_string(out_dir.join("alpha.csv")).unwrap();
    assert!(alpha.starts_with("atom,value"));
    assert_eq!(alpha.lines().count(), 1 + 3 * 6);
}

#[test]
fn penalty_at_anchor_gives_empty_support() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    let schema = Schema::from_path(dir.join("schema.json")).unwrap();
    let data = read_csv_path(dir.join("data.csv"), Some(&schema)).unwrap();
    let links = schema.links(&data).unwrap();
    let dict = read_dictionary_path(dir.join("dict.json"), 30, 6).unwrap();
    let a = anchors(&data, &links, &dict).unwrap();
    let out_dir = tmp.path().join("fit");
    let l1 = format!("{:?}", 1.01 * a.lambda1_max);
    let l2 = format!("{:?}", 1.01 * a.lambda2_max);
    let out = run_with("fit", &dir, &["--lambda1", &l1, "--lambda2", &l2, "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0);
    let report: FitReport = serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.alpha_nonzero, 0);
    assert_eq!(report.rank, 0);
}

#[test]
fn impute_fills_only_missing_cells() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    let target = tmp.path().join("completed.csv");
    let out = run_with("impute", &dir, &["--lambda1", "2", "--lambda2", "0.5", "--round", "--output", s(&target)]);
    assert!(matches!(code(&out), 0 | 2));
    let text = fs::read_to_string(&target).unwrap();
    assert!(!text.contains("NA"));
    let schema = Schema::from_path(dir.join("schema.json")).unwrap();
    let before = read_csv_path(dir.join("data.csv"), Some(&schema)).unwrap();
    let after = read_csv_path(&target, Some(&schema)).unwrap();
    assert_eq!(after.observed_count(), 30 * 6);
    for (i, j, v) in before.observed() {
        assert_eq!(after.get(i, j), Some(v));
    }
}

#[test]
fn impute_to_stdout_with_cross_validation() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    let out = run_with("impute", &dir, &["--auto-lambda", "--seed", "3"]);
    assert!(matches!(code(&out), 0 | 2), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn cv_writes_json_and_long_csv() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    let out_dir = tmp.path().join("cv");
    let out = run_with("cv", &dir, &["--n1", "3", "--n2", "2", "--folds", "3", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("cv.csv")).unwrap();
    assert!(csv.starts_with("lambda1,lambda2,fold,error\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 3);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("cv.json")).unwrap()).unwrap();
    assert_eq!(json["n_folds"], 3);
}

#[test]
fn input_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = mimi(&["fit", "--data", s(&missing), "--dict", s(&missing), "--lambda1", "1", "--lambda2", "1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,cat\n2,dog\n").unwrap();
    let dict = tmp.path().join("dict.json");
    fs::write(&dict, r#"{"type": "rowcol"}"#).unwrap();
    let out = mimi(&["fit", "--data", s(&bad), "--dict", s(&dict), "--lambda1", "1", "--lambda2", "1"]);
    assert_eq!(code(&out), 1);

    assert_eq!(code(&mimi(&["fit", "--bogus"])), 1);
    assert_eq!(code(&mimi(&["simulate", "--threads", "0", "--out", s(tmp.path())])), 1);
    assert_eq!(code(&mimi(&["--help"])), 0);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let dir = simulated(&tmp);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_with("fit", &dir, &["--threads", "1", "--lambda1", "2", "--lambda2", "0.5", "--out", s(&a)]);
    run_with("fit", &dir, &["--threads", "2", "--lambda1", "2", "--lambda2", "0.5", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("l.csv")).unwrap(), fs::read(b.join("l.csv")).unwrap());
}

fn tiny_cv() -> CvSettings {
    CvSettings { n1: 3, n2: 2, n_folds: 3, baseline_grid: 3, ..CvSettings::default() }
}

fn tiny_base() -> SimDesign {
    SimDesign { m1: 30, m2: 6, n_groups: 2, s: 2, r: 1, ..SimDesign::default() }
}

/// Reruns a study from its manifest and checks the tables match byte for byte.
fn reproduce_matches(study: &str, reference: &Path, tmp: &TempDir) {
    let manifest = reference.join(format!("{study}_manifest.json"));
    let out_dir = tmp.path().join(format!("{study}_rerun"));
    let out = mimi(&["reproduce", "--study", study, "--manifest", s(&manifest), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for entry in fs::read_dir(reference).unwrap() {
        let name = entry.unwrap().file_name();
        let rerun = fs::read(out_dir.join(&name)).unwrap();
        assert!(!rerun.is_empty());
        assert_eq!(fs::read(reference.join(&name)).unwrap(), rerun, "{name:?}");
    }
}

#[test]
fn reproduce_reruns_every_study_from_its_manifest() {
    let tmp = TempDir::new().unwrap();

    let est = EstimationStudy { base: tiny_base(), s_list: vec![2], r_list: vec![1], n_reps: 2, cv: tiny_cv(), ..EstimationStudy::default() };
    let dir = tmp.path().join("estimation");
    write_study(&run_estimation_study(&est).unwrap(), &dir).unwrap();
    reproduce_matches("estimation", &dir, &tmp);

    let imp = ImputationStudy {
        base: SimDesign { layout: ColumnLayout::Mixed, ..tiny_base() },
        missing: vec![0.3],
        rhos: vec![1.0],
        pilot_missing: 0.3,
        n_reps: 2,
        cv: tiny_cv(),
        ..ImputationStudy::default()
    };
    let dir = tmp.path().join("imputation");
    write_study(&run_imputation_study(&imp).unwrap(), &dir).unwrap();
    reproduce_matches("imputation", &dir, &tmp);

    let rates = RateStudy { base: tiny_base(), sizes: vec![30, 60], n_reps: 3, bootstrap: 50, cv: tiny_cv(), ..RateStudy::default() };
    let dir = tmp.path().join("rates");
    write_study(&run_rate_study(&rates).unwrap(), &dir).unwrap();
    assert!(dir.join("rates_slopes.csv").is_file());
    reproduce_matches("rates", &dir, &tmp);
}

#[test]
fn reproduce_rejects_a_manifest_of_another_study() {
    let tmp = TempDir::new().unwrap();
    let est = EstimationStudy { base: tiny_base(), s_list: vec![2], r_list: vec![1], n_reps: 1, cv: tiny_cv(), ..EstimationStudy::default() };
    let dir = tmp.path().join("estimation");
    write_study(&run_estimation_study(&est).unwrap(), &dir).unwrap();
    let manifest = dir.join("estimation_manifest.json");
    let out = mimi(&["reproduce", "--study", "rates", "--manifest", s(&manifest), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 1);
}
