use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tabv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabv")).args(args).output().expect("run tabv")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const OPEN_FIELD: &str = r#"{
  "world": {"kind": "shapes", "size": [12, 6], "height": 3, "resolution": 0.2},
  "task": {"kind": "navigate",
           "start": {"position": [2, 3, 0], "heading": 0, "mode": "terrestrial"},
           "goals": [{"position": [9, 3, 0], "heading": 0, "mode": "terrestrial"}]}
}"#;

const FENCE: &str = r#"{
  "world": {"kind": "shapes", "size": [12, 6], "height": 3, "resolution": 0.2,
            "boxes": [{"min": [5.8, -1], "max": [6.2, 7], "height": 1}]},
  "task": {"kind": "navigate",
           "start": {"position": [2, 3, 0], "heading": 0, "mode": "terrestrial"},
           "goals": [{"position": [10, 3, 0], "heading": 0, "mode": "terrestrial"}]}
}"#;

#[test]
fn open_field_plan_stays_on_the_ground() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", OPEN_FIELD);
    let out = dir.path().join("out");
    let o = tabv(&["plan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = read_json(&out.join("plan.json"));
    assert_eq!(plan["success"], Value::Bool(true), "{plan}");
    assert_eq!(plan["aerial_pieces"], 0);
    for f in ["config.json", "trajectory.json", "legs.json", "costs.csv", "reference.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn fence_forces_a_flight() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", FENCE);
    let out = dir.path().join("out");
    let o = tabv(&["plan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = read_json(&out.join("plan.json"));
    assert!(plan["aerial_pieces"].as_u64().unwrap() >= 1, "{plan}");

    // The planned trajectory can be tracked on its own.
    let track = dir.path().join("track");
    let o = tabv(&[
        "track",
        "--config",
        cfg.to_str().unwrap(),
        "--trajectory",
        out.join("trajectory.json").to_str().unwrap(),
        "--out",
        track.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_json(&track.join("metrics.json"));
    assert!(m["metrics"]["rmse_position"].as_f64().unwrap() < 0.12, "{m}");
}

#[test]
fn misspelled_key_exits_with_config_code_and_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"task": {"kind": "hover", "position": [0, 0, 1.5]}, "nmpc": {"horizn": 10}}"#);
    let o = tabv(&["track", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("nmpc") && err.contains("horizn"), "{err}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = tabv(&["plan", "--config", dir.path().join("nope.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn hover_holds_and_metrics_match_the_log() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"task": {"kind": "hover", "position": [0, 0, 1.5], "duration": 2}}"#);
    let out = dir.path().join("out");
    let o = tabv(&["track", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_json(&out.join("metrics.json"));
    let reported = m["metrics"]["rmse_position"].as_f64().unwrap();
    assert!(reported < 0.01, "{m}");

    let mut rdr = csv::Reader::from_path(out.join("log.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (p, r) = (
        [col("px"), col("py"), col("pz")],
        [col("ref_px"), col("ref_py"), col("ref_pz")],
    );
    let mut sum = 0.0;
    let mut n = 0usize;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let f = |i: usize| rec[i].parse::<f64>().unwrap();
        sum += (0..3).map(|k| (f(p[k]) - f(r[k])).powi(2)).sum::<f64>();
        n += 1;
    }
    assert_eq!(n as u64, m["metrics"]["ticks"].as_u64().unwrap());
    let recomputed = (sum / n as f64).sqrt();
    assert!((recomputed - reported).abs() <= 1e-12, "{recomputed} vs {reported}");
}

#[test]
fn saturating_start_still_completes() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"task": {"kind": "hover", "position": [0, 0, 1.5], "start": [1.5, 0.5, 0.0], "duration": 4}}"#,
    );
    let out = dir.path().join("out");
    let o = tabv(&["track", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_json(&out.join("metrics.json"));
    assert!(m["metrics"]["saturation_fraction"].as_f64().unwrap() > 0.0, "{m}");
    assert_eq!(m["run"]["status"], "completed");
}

#[test]
fn equilibria_benchmark_writes_a_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = tabv(&["benchmark", "--suite", "equilibria", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    assert!(out.join("summary.txt").exists());
    let cases = report.as_array().unwrap();
    assert_eq!(cases.len(), 2);
    for c in cases {
        assert_eq!(c["completed"], true, "{c}");
        assert!(c["max_input_error"].as_f64().unwrap() <= 1e-3, "{c}");
    }
}

#[test]
fn small_forest_benchmark_respects_seed_count() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = tabv(&["benchmark", "--suite", "forest-500", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["runs"], 2, "{report}");
}

#[test]
fn unknown_suite_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = tabv(&["benchmark", "--suite", "nope", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn world_command_exports_the_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.json", FENCE);
    let out = dir.path().join("out");
    let o = tabv(&["world", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("world.grid").exists() && out.join("world.json").exists());
}
