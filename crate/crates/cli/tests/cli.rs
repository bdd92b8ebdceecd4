use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lanedep::bgmm::{BgmModel, HyperRectBounds, MomentEstimator};
use lanedep::sampler::{regenerate_event, Noise};
use lanedep::trace::io::{write_features_file, write_trace_file};
use lanedep::trace::{FeatureVector, Side, TrajectoryTrace};
use nalgebra::{DMatrix, DVector};

fn lanedep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanedep"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn xi(d_y: f64, v_bar: f64) -> FeatureVector {
    FeatureVector {
        duration: 3.0,
        d_y,
        sigma_y: 0.0,
        v_bar,
        a_bar: 0.0,
        sigma_v: 0.0,
        rho_0: 0.0,
        delta_rho: 0.0,
    }
}

#[test]
fn extract_empty_dir_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("traces")).unwrap();
    let o = lanedep(&["extract", "traces", "--out", "f.csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("f.csv")).unwrap();
    assert_eq!(text.trim(), "T,d_y,sigma_y,v_bar,a_bar,sigma_v,rho_0,delta_rho");
    assert!(tmp.path().join("f.csv.meta.json").is_file());
}

#[test]
fn extract_logs_slow_event_with_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("traces");
    fs::create_dir(&dir).unwrap();
    write_trace_file(&dir.join("a_fast.csv"), &regenerate_event(&xi(0.5, 20.0), 0.1, Noise::Off, 0).unwrap()).unwrap();
    write_trace_file(&dir.join("b_slow.csv"), &regenerate_event(&xi(0.5, 4.0), 0.1, Noise::Off, 0).unwrap()).unwrap();
    let o = lanedep(&["extract", "traces", "--out", "f.csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(tmp.path().join("f.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let log = fs::read_to_string(tmp.path().join("f.rejected.json")).unwrap();
    assert!(log.contains("b_slow.csv") && log.contains("min_mean_speed"), "{log}");
    assert!(!log.contains("a_fast.csv"));
}

#[test]
fn fit_with_too_few_events_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let rows: Vec<FeatureVector> = (0..10)
        .map(|i| {
            let u = i as f64;
            FeatureVector::from_slice(&[3.0 + u, 0.3 + 0.01 * u, 0.02 + 0.001 * u, 20.0 - u, 0.1 * u, 0.1 + 0.01 * u, 1e-5 * u, -1e-5 * u])
                .unwrap()
        })
        .collect();
    write_features_file(&tmp.path().join("f.csv"), &rows).unwrap();
    let o = lanedep(&["fit", "f.csv", "--k", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("at least"));
}

#[test]
fn sample_from_tiny_box_reports_stall() {
    let tmp = tempfile::tempdir().unwrap();
    let d = 8;
    let mean = DVector::from_column_slice(&[3.0, 0.4, 0.03, 20.0, 0.0, 0.2, 0.0, 0.0]);
    let sd = [0.5, 0.1, 0.01, 2.0, 0.1, 0.05, 1e-5, 1e-5];
    let cov = DMatrix::from_fn(d, d, |r, c| if r == c { sd[r] * sd[r] } else { 0.0 });
    // 30 standard deviations out in the duration, a point-sized slab.
    let mut lower: Vec<f64> = mean.iter().zip(&sd).map(|(m, s)| m - 10.0 * s).collect();
    let mut upper: Vec<f64> = mean.iter().zip(&sd).map(|(m, s)| m + 10.0 * s).collect();
    lower[0] = 3.0 + 30.0 * 0.5;
    upper[0] = lower[0] + 1e-6;
    let bounds = HyperRectBounds::new(lower, upper).unwrap();
    let model = BgmModel::from_parts(Side::Left, vec![1.0], vec![mean], vec![cov], bounds, &MomentEstimator::closed_form())
        .unwrap();
    fs::write(tmp.path().join("m.json"), model.to_json_string().unwrap()).unwrap();
    let o = lanedep(&["sample", "m.json", "--count", "5", "--threads", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("no sample accepted"));
}

#[test]
fn evaluate_missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("ev")).unwrap();
    let o = lanedep(&["evaluate", "ev", "--config", "missing.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.json"));
}

#[test]
fn evaluate_without_triggers_reports_no_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ev");
    fs::create_dir_all(dir.join("traces")).unwrap();
    let rows = vec![xi(0.1, 20.0), xi(0.15, 25.0)];
    let traces: Vec<TrajectoryTrace> = rows.iter().map(|x| regenerate_event(x, 0.1, Noise::Off, 0).unwrap()).collect();
    for (i, t) in traces.iter().enumerate() {
        write_trace_file(&dir.join("traces").join(format!("event_{i:05}.csv")), t).unwrap();
    }
    write_features_file(&dir.join("features.csv"), &rows).unwrap();
    let o = lanedep(&["evaluate", "ev", "--out", "eval"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("eval/report.json")).unwrap()).unwrap();
    let left = &report["summaries"][0];
    assert_eq!(left["triggered"], 0);
    assert_eq!(left["reduction_pct"], 0.0);
}

fn pipeline(dir: &Path) {
    let steps: [&[&str]; 5] = [
        &["synth", "--n", "300", "--seed", "11", "--out", "corpus"],
        &["extract", "corpus/traces", "--out", "features.csv"],
        &["fit", "features.csv", "--k-range", "1..2", "--max-iter", "15", "--seed", "4", "--out", "model.json"],
        &["sample", "model.json", "--count", "30", "--seed", "5", "--out", "events"],
        &["evaluate", "events", "--out", "eval"],
    ];
    for args in steps {
        let o = lanedep(args, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for file in ["features.csv", "model.json", "bic.csv", "events/features.csv", "events/report.json", "eval/report.json"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    let bic = fs::read_to_string(a.path().join("bic.csv")).unwrap();
    assert!(bic.starts_with("K,bic,loglik"));
    assert_eq!(bic.lines().count(), 3);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("eval/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "evaluate");
    assert_eq!(meta["inputs"].as_array().unwrap().len(), 30);
    assert_eq!(meta["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("model.json")).unwrap()).unwrap();
    assert!(model["meta"]["input_hash"].is_string());
}
