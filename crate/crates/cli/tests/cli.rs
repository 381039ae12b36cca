use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdm"))
        .args(args)
        .env_remove("FDM_SEED")
        .env_remove("FDM_THREADS")
        .output()
        .expect("run fdm")
}

fn ok(args: &[&str]) {
    let out = fdm(args);
    assert!(
        out.status.success(),
        "fdm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn manifests(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count()
}

fn simulate_and_fit(dir: &Path) {
    ok(&["simulate", "--units", "5", "--cycles", "16", "--grid-size", "80", "--out", &p(dir, "sim")]);
    ok(&["fit", "--dataset", &p(dir, "sim/dataset.json"), "--out", &p(dir, "fit")]);
}

#[test]
fn simulate_fit_predict_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate_and_fit(d);
    ok(&["predict", "--fit", &p(d, "fit/model.json"), "--dataset", &p(d, "sim/dataset.json"), "--out", &p(d, "pred")]);
    ok(&["evaluate", "--predictions", &p(d, "pred/predictions.csv"), "--out", &p(d, "eval")]);
    let metrics = read_csv(&d.join("eval/metrics.csv"));
    assert_eq!(metrics.len(), 3);
    for m in &metrics {
        let rmspe: f64 = m[2].parse().unwrap();
        assert!(rmspe >= 0.0 && rmspe.is_finite(), "{m:?}");
    }
    for sub in ["sim", "fit", "pred", "eval"] {
        assert_eq!(manifests(&d.join(sub)), 1, "{sub}");
    }
    let coef = read_csv(&d.join("fit/coefficients.csv"));
    assert_eq!(coef.iter().filter(|r| &r[0] == "eod").count(), 5);
    assert!(coef.iter().all(|r| r[3].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        simulate_and_fit(d);
        ok(&["predict", "--fit", &p(d, "fit/model.json"), "--dataset", &p(d, "sim/dataset.json"), "--out", &p(d, "pred")]);
    }
    for f in ["sim/dataset.json", "fit/model.json", "fit/coefficients.csv", "pred/predictions.csv", "pred/paths.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
}

#[test]
fn forecast_horizon_rows_per_unit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate_and_fit(d);
    ok(&[
        "predict", "--fit", &p(d, "fit/model.json"), "--dataset", &p(d, "sim/dataset.json"),
        "--horizon", "20", "--rest-hours", "5", "--out", &p(d, "pred"),
    ]);
    let rows = read_csv(&d.join("pred/forecast.csv"));
    assert_eq!(rows.len(), 5 * 20);
    for unit in ["U001", "U002", "U003", "U004", "U005"] {
        let cycles: Vec<u32> = rows.iter().filter(|r| &r[0] == unit).map(|r| r[1].parse().unwrap()).collect();
        assert_eq!(cycles, (17..=36).collect::<Vec<u32>>(), "{unit}");
    }
    let curves = read_csv(&d.join("pred/forecast_curves.csv"));
    assert_eq!(curves.len(), 5 * 20 * 80);
}

#[test]
fn failed_command_leaves_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = fdm(&["fit", "--dataset", &p(d, "missing.json"), "--out", &p(d, "fit")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load"), "{err}");
    assert_eq!(std::fs::read_dir(d).unwrap().count(), 0);
}

#[test]
fn functional_fit_writes_slope_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["simulate", "--units", "5", "--cycles", "16", "--model", "flmm", "--grid-size", "80", "--out", &p(d, "sim")]);
    ok(&[
        "fit", "--dataset", &p(d, "sim/dataset.json"), "--model", "flmm", "--lambda-beta", "0.01",
        "--lambda-b", "1", "--svg", "--out", &p(d, "fit"),
    ]);
    assert_eq!(read_csv(&d.join("fit/beta.csv")).len(), 80);
    let svg = std::fs::read_to_string(d.join("fit/beta.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn experiment_and_bootstrap_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&[
        "experiment", "--units", "4", "--cycles", "12", "--replications", "2", "--grid-size", "60",
        "--models", "lme", "--methods", "gpm,fdm-lme", "--out", &p(d, "exp"),
    ]);
    // 2 replicates × (2 + 6) metrics
    assert_eq!(read_csv(&d.join("exp/results.csv")).len(), 16);
    assert!(read_csv(&d.join("exp/failures.csv")).is_empty());
    let header = csv::Reader::from_path(d.join("exp/failures.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(header, vec!["cell", "replicate", "method", "error"]);

    simulate_and_fit(d);
    ok(&[
        "bootstrap", "--dataset", &p(d, "sim/dataset.json"), "--replicates", "20", "--levels", "0.8,0.95",
        "--out", &p(d, "boot"),
    ]);
    let iv = read_csv(&d.join("boot/intervals.csv"));
    // 5 units × 4 test cycles × 2 levels
    assert_eq!(iv.len(), 40);
    assert_eq!(read_csv(&d.join("boot/coverage.csv")).len(), 2);
}

/// Twenty units with four cycles each; voltage falls linearly from 4.2 V.
fn write_fixture(dir: &Path, drop_meta_unit: Option<usize>) -> (PathBuf, PathBuf) {
    let mut curves = String::from("unit_id,cycle,time_s,voltage\n");
    let mut meta = String::from("unit_id,temp_C,dc_A,sv_V,cycle,start_timestamp\n");
    for u in 0..20 {
        for c in 1..=4 {
            let eod = 3000.0 - 40.0 * c as f64 - u as f64;
            for k in 0..=30 {
                let t = eod * k as f64 / 30.0;
                writeln!(curves, "B{u:02},{c},{t},{}", 4.2 - 1.5 * t / eod).unwrap();
            }
            if drop_meta_unit != Some(u) {
                let start = 1_300_000_000 + 20_000 * c as i64;
                writeln!(meta, "B{u:02},24,2,2.{},{c},{start}", u % 5).unwrap();
            }
        }
    }
    let (cp, mp) = (dir.join("curves.csv"), dir.join("meta.csv"));
    std::fs::write(&cp, curves).unwrap();
    std::fs::write(&mp, meta).unwrap();
    (cp, mp)
}

#[test]
fn ingest_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (c, m) = write_fixture(d, None);
    ok(&["ingest", "--curves", &c.to_string_lossy(), "--meta", &m.to_string_lossy(), "--grid-size", "50", "--out", &p(d, "ds")]);
    let text = std::fs::read_to_string(d.join("ds/dataset.json")).unwrap();
    let ds = fdm_core::Dataset::from_json(&text).unwrap();
    assert_eq!(ds.n_units(), 20);
    for u in &ds.units {
        let cycles: Vec<u32> = u.cycles.iter().map(|r| r.cycle).collect();
        assert_eq!(cycles, vec![1, 2, 3, 4]);
    }
    assert_eq!(manifests(&d.join("ds")), 1);
}

#[test]
fn ingest_missing_metadata_names_unit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (c, m) = write_fixture(d, Some(7));
    let out = fdm(&["ingest", "--curves", &c.to_string_lossy(), "--meta", &m.to_string_lossy(), "--out", &p(d, "ds")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("B07"));
    assert!(!d.join("ds").exists());
}
