use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perfusion_core::ingest::{save_series, RoiSeries};
use perfusion_core::model::{response_curve, PerfusionParams};
use tempfile::TempDir;

/// Small, coarse cohorts keep each run to a few seconds.
const SMALL: &str = r#"
seed = 11

[synth]
n_patients = 6
n_cancer = 2
rois_per_patient = 5
sample_interval = 0.5
duration = 300.0

[classifier.gbdt]
n_trees = 40
"#;

fn perfusion(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfusion"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn synth(dir: &Path) -> PathBuf {
    let out = perfusion(&["--config", "run.toml", "--out", "data", "synth"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("data/manifest.toml")
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn fit_writes_one_row_per_region() {
    let dir = setup(&SMALL.replace("n_patients = 6\nn_cancer = 2", "n_patients = 1\nn_cancer = 0"));
    synth(dir.path());
    let out = perfusion(&["--config", "run.toml", "--out", "fits", "fit", "data/manifest.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("fits/fits.csv"));
    assert_eq!(rows.len(), 5);
    assert!(dir.path().join("fits/fits.json").is_file());
}

#[test]
fn corrupt_region_is_reported_and_others_processed() {
    let dir = setup(&SMALL.replace("n_patients = 6\nn_cancer = 2", "n_patients = 2\nn_cancer = 1"));
    synth(dir.path());
    fs::write(dir.path().join("data/series/P01_R03.csv"), "t,intensity,dispersion\n0,1,1\n0.5,oops,1\n").unwrap();
    let out = perfusion(&["--config", "run.toml", "--out", "fits", "fit", "data/manifest.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("P01") && stderr.contains("R03"), "{stderr}");
    assert_eq!(csv_rows(&dir.path().join("fits/fits.csv")).len(), 9);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup(&SMALL.replace("n_patients = 6\nn_cancer = 2", "n_patients = 1\nn_cancer = 1"));
    synth(dir.path());
    for out_dir in ["a", "b"] {
        let out = perfusion(&["--config", "run.toml", "--out", out_dir, "fit", "data/manifest.toml"], dir.path());
        assert!(out.status.success());
    }
    for file in ["fits.csv", "fits.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
}

#[test]
fn features_and_train_chain() {
    let dir = setup(SMALL);
    synth(dir.path());
    let steps: [&[&str]; 3] = [
        &["--config", "run.toml", "--out", "out", "fit", "data/manifest.toml"],
        &["--config", "run.toml", "--out", "out", "features", "out/fits.json"],
        &["--config", "run.toml", "--out", "out", "train", "out/signatures.json"],
    ];
    for args in steps {
        let out = perfusion(args, dir.path());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(csv_rows(&dir.path().join("out/signatures.csv")).len(), 30);
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/model.json")).unwrap()).unwrap();
    assert_eq!(model["scheme"], "two_class");
}

#[test]
fn evaluate_report_matches_predictions() {
    let dir = setup(SMALL);
    synth(dir.path());
    let out = perfusion(&["--config", "run.toml", "--out", "eval", "evaluate", "data/manifest.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let c = &report["confusion"];
    let count = |k: &str| c[k].as_u64().unwrap();
    assert_eq!(count("tp") + count("fn"), 2);
    assert_eq!(count("tn") + count("fp"), 4);

    let rows = csv_rows(&dir.path().join("eval/predictions.csv"));
    assert_eq!(rows.len(), 6);
    let correct = rows.iter().filter(|r| r[1] == r[8]).count();
    let accuracy = report["case_accuracy"].as_f64().unwrap();
    assert!((accuracy - correct as f64 / 6.0).abs() < 1e-12);
    assert!(dir.path().join("eval/report.txt").is_file());
    assert!(dir.path().join("eval/roi_predictions.csv").is_file());
}

fn write_roi(dir: &Path, name: &str, p: &PerfusionParams, duration: f64) -> PathBuf {
    let dt = 0.5;
    let n = (duration / dt) as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let y = response_curve(p, &times).unwrap();
    let series = RoiSeries::new(dt, y, vec![2.0; n]).unwrap();
    let path = dir.join(name);
    save_series(&series, &path).unwrap();
    path
}

fn fitted_column(dir: &Path) -> Vec<f64> {
    csv_rows(&dir.join("curve.csv")).iter().map(|r| r[2].parse().unwrap()).collect()
}

#[test]
fn inspect_underdamped_region_oscillates() {
    let dir = TempDir::new().unwrap();
    let p = PerfusionParams::new(8.0, 0.3, 80.0, 250.0, 10.0, 10.0).unwrap();
    write_roi(dir.path(), "osc.csv", &p, 300.0);
    let out = perfusion(&["--out", "o", "inspect", "osc.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"accepted\": true"), "{stdout}");
    let y = fitted_column(&dir.path().join("o"));
    let turns = y
        .windows(3)
        .filter(|w| (w[1] - w[0]) * (w[2] - w[1]) < 0.0)
        .count();
    assert!(turns >= 2, "fitted curve has {turns} turning points");
}

#[test]
fn inspect_rejected_region_exits_with_no_prediction() {
    let dir = TempDir::new().unwrap();
    let p = PerfusionParams::new(8.0, 1.2, 80.0, 250.0, 10.0, 10.0).unwrap();
    write_roi(dir.path(), "short.csv", &p, 80.0);
    let out = perfusion(&["--out", "o", "inspect", "short.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("too_short"));
    assert!(dir.path().join("o/curve.csv").is_file());
}

#[test]
fn inspect_flat_region_completes() {
    let dir = TempDir::new().unwrap();
    let n = 601;
    let series = RoiSeries::new(0.5, vec![20.0; n], vec![1.0; n]).unwrap();
    save_series(&series, &dir.path().join("flat.csv")).unwrap();
    let out = perfusion(&["--out", "o", "inspect", "flat.csv"], dir.path());
    assert_ne!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let y = fitted_column(&dir.path().join("o"));
    assert_eq!(y.len(), n);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn bad_config_is_an_error() {
    let dir = setup("unknown_key = 1\n");
    let out = perfusion(&["--config", "run.toml", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
